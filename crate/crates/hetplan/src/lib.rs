//! Planning and simulation for data-parallel training on heterogeneous GPUs.
//!
//! The planner picks, for every GPU, a microbatch size and a number of
//! gradient-accumulation steps, then splits the sharded training state so
//! that each GPU's memory use matches its capacity. The simulator replays a
//! plan as a discrete-event schedule to check the predictions.
//!
//! Planning code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optimizer;
pub mod perf;
pub mod scalar;
pub mod sharding;
pub mod sim;
pub mod synth;
pub mod validate;

pub use error::{Error, Result};
pub use model::{
    ClusterDoc, ClusterSpec, CommProfile, GpuAssignment, GpuSpec, ModelSpec, ProfileDoc,
    TrainPlan, GIB,
};
pub use optimizer::{
    brute_force_optimize, complexity_budget, dp_optimize, partition_state, per_gpu_layer_latency, plan_from_choices,
    ComputeChoice, OptimizerOptions, OptimizerReport,
};
pub use scalar::Scalar;
pub use sim::{simulate_iteration, SimConfig, SimResult};
pub use sharding::{assign_unit_shards, UnitShard, UnitShardPlan};
pub use validate::{validate_plan, Constraint, Violation};

pub type LatencyModel64 = perf::LatencyModel<f64>;
pub type LatencyModel32 = perf::LatencyModel<f32>;
pub type MemoryModel64 = perf::MemoryModel<f64>;
pub type MemoryModel32 = perf::MemoryModel<f32>;
pub type GpuPerf64 = perf::GpuPerf<f64>;
pub type GpuPerf32 = perf::GpuPerf<f32>;
pub type ClusterPerf64 = perf::ClusterPerf<f64>;
pub type ClusterPerf32 = perf::ClusterPerf<f32>;
pub type LayerLatency64 = optimizer::LayerLatency<f64>;
pub type LayerLatency32 = optimizer::LayerLatency<f32>;
pub type Optimized64 = optimizer::Optimized<f64>;
pub type Optimized32 = optimizer::Optimized<f32>;
pub type GradFixture64 = gradcheck::GradFixture<f64>;
pub type GradFixture32 = gradcheck::GradFixture<f32>;
