//! Batch-size, gradient-accumulation and training-state allocation.
//!
//! The objective is the per-layer forward+backward time of the slowest GPU,
//! where each GPU's time is
//! `max(T_f(m, l), AG') + max(T_b(m, l), AG' + RS')` and the primed
//! collective latencies carry the uneven-sharding overhead whenever the GPU
//! cannot hold an even share of the training state next to its compute
//! memory. [`dp_optimize`] solves it exactly by dynamic programming over
//! (GPU index, batch mass, microbatch mass); [`brute_force_optimize`] is an
//! exhaustive reference for small instances.

mod brute;
mod dp;
mod partition;

use serde::Serialize;

pub use brute::{brute_force_optimize, BRUTE_FORCE_MAX_BATCH, BRUTE_FORCE_MAX_GPUS};
pub use dp::dp_optimize;
pub use partition::{greedy_quanta, partition_state, StatePartition, DEFAULT_PARTITION_QUANTA};

use crate::error::{Error, Result};
use crate::model::{ClusterSpec, GpuAssignment, ModelSpec, TrainPlan};
use crate::perf::ClusterPerf;
use crate::scalar::Scalar;
use crate::sharding::assign_unit_shards;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OptimizerOptions {
    /// Let a GPU take no compute (it still holds training state).
    pub allow_idle: bool,
    /// Skip `l` once a GPU's own layer time can no longer improve a cell.
    pub dominance_pruning: bool,
    /// Worker threads for the DP sweep; 0 picks the rayon default.
    pub threads: usize,
    pub partition_quanta: u32,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            allow_idle: false,
            dominance_pruning: true,
            threads: 0,
            partition_quanta: DEFAULT_PARTITION_QUANTA,
        }
    }
}

/// Microbatch size and count for one GPU; `(0, 0)` marks an idle GPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct ComputeChoice {
    pub microbatch: u32,
    pub num_microbatches: u32,
}

impl ComputeChoice {
    pub const IDLE: ComputeChoice = ComputeChoice {
        microbatch: 0,
        num_microbatches: 0,
    };

    pub fn new(microbatch: u32, num_microbatches: u32) -> Self {
        ComputeChoice {
            microbatch,
            num_microbatches,
        }
    }

    pub fn batch(&self) -> u32 {
        self.microbatch * self.num_microbatches
    }

    pub fn is_idle(&self) -> bool {
        self.microbatch == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerLatency<T> {
    pub t_fwd: T,
    pub t_bwd: T,
    pub used_uneven_comm: bool,
}

impl<T: Scalar> LayerLatency<T> {
    pub fn total(&self) -> T {
        self.t_fwd + self.t_bwd
    }
}

/// Per-GPU cached quantities used by both solvers.
pub(crate) struct GpuCostTable<T> {
    /// Largest microbatch whose compute memory fits, capped at the batch size.
    pub max_micro: u32,
    fwd: Vec<T>,
    bwd: Vec<T>,
    uneven: Vec<bool>,
    even_comm: (T, T),
    uneven_comm: (T, T),
}

impl<T: Scalar> GpuCostTable<T> {
    pub fn new(
        cluster: &ClusterSpec,
        model: &ModelSpec,
        perf: &ClusterPerf<T>,
        gpu: usize,
        batch: u32,
    ) -> Self {
        let cap = T::lit(cluster.effective_capacity(gpu));
        let share = even_state_share::<T>(cluster, model);
        let p = &perf.gpus[gpu];
        let mut table = GpuCostTable {
            max_micro: 0,
            fwd: vec![T::zero()],
            bwd: vec![T::zero()],
            uneven: vec![false],
            even_comm: perf.collectives(false),
            uneven_comm: perf.collectives(true),
        };
        for m in 1..=batch {
            let mem = p.memory.eval(m);
            if mem > cap {
                break;
            }
            table.max_micro = m;
            table.fwd.push(p.fwd.eval(m));
            table.bwd.push(p.bwd.eval(m));
            table.uneven.push(mem + share > cap);
        }
        table
    }

    #[inline]
    pub fn layer(&self, m: u32, l: u32) -> LayerLatency<T> {
        let mi = m as usize;
        let lt = T::count(l as u64);
        let uneven = self.uneven[mi];
        let (ag, rs) = if uneven {
            self.uneven_comm
        } else {
            self.even_comm
        };
        LayerLatency {
            t_fwd: (lt * self.fwd[mi]).max(ag),
            t_bwd: (lt * self.bwd[mi]).max(ag + rs),
            used_uneven_comm: uneven,
        }
    }

    #[inline]
    pub fn cost(&self, m: u32, l: u32) -> T {
        self.layer(m, l).total()
    }

    pub fn is_uneven(&self, m: u32) -> bool {
        self.uneven[m as usize]
    }
}

pub(crate) fn even_state_share<T: Scalar>(cluster: &ClusterSpec, model: &ModelSpec) -> T {
    T::lit(model.state_bytes()) / T::count(cluster.len() as u64)
}

/// Constraint III in the conservative form shared by both solvers.
pub(crate) fn aggregate_fits<T: Scalar>(
    cluster: &ClusterSpec,
    model: &ModelSpec,
    perf: &ClusterPerf<T>,
    micro_mass: u32,
) -> bool {
    T::lit(model.state_bytes()) + perf.aggregate_compute_bound(micro_mass)
        <= T::lit(cluster.total_effective_capacity())
}

/// Layer latency for `l` microbatches of size `m` on one GPU. Errors when
/// `M_compute(m)` alone exceeds the GPU's effective capacity.
pub fn per_gpu_layer_latency<T: Scalar>(
    cluster: &ClusterSpec,
    model: &ModelSpec,
    perf: &ClusterPerf<T>,
    gpu: usize,
    m: u32,
    l: u32,
) -> Result<LayerLatency<T>> {
    if m == 0 || l == 0 {
        return Err(Error::Validation("microbatch size and count must be >= 1".into()));
    }
    let table = GpuCostTable::new(cluster, model, perf, gpu, m);
    if table.max_micro < m {
        return Err(Error::infeasible(
            "II",
            format!(
                "compute memory for m={m} exceeds effective capacity of GPU {}",
                cluster.gpus[gpu].id
            ),
        ));
    }
    Ok(table.layer(m, l))
}

/// Raw transition count of the unpruned recurrence, i.e. the number of
/// innermost iterations of the (i, j, k, m, l) loop nest.
pub fn complexity_budget(gpus: usize, batch: u32) -> u128 {
    let mut per_gpu: u128 = 0;
    for j in 1..=batch as u128 {
        for m in 1..=j {
            per_gpu += (j - m + 1) * (j / m);
        }
    }
    gpus as u128 * per_gpu
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OptimizerReport {
    pub solver: String,
    pub gpus: usize,
    pub global_batch: u32,
    pub threads: usize,
    pub estimated_transitions: u128,
    pub transitions: u64,
    pub reachable_states: u64,
    pub pruned_memory: u64,
    pub pruned_dominance: u64,
    pub best_micro_mass: u32,
    pub dp_assumed_uneven: bool,
    pub uneven_units: u32,
    pub partition_matches_dp_assumption: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct Optimized<T> {
    pub plan: TrainPlan,
    pub choices: Vec<ComputeChoice>,
    pub objective: T,
    pub report: OptimizerReport,
}

/// Turns a compute assignment into a full plan: state partition, unit
/// shards, and Eq.-style layer predictions.
pub(crate) fn finish_plan<T: Scalar>(
    cluster: &ClusterSpec,
    model: &ModelSpec,
    perf: &ClusterPerf<T>,
    choices: &[ComputeChoice],
    objective: T,
    quanta: u32,
    report: &mut OptimizerReport,
) -> Result<TrainPlan> {
    let n = cluster.len();
    let tables: Vec<GpuCostTable<T>> = (0..n)
        .map(|i| GpuCostTable::new(cluster, model, perf, i, choices[i].microbatch))
        .collect();
    let dp_uneven = choices
        .iter()
        .zip(&tables)
        .any(|(c, t)| !c.is_idle() && t.is_uneven(c.microbatch));

    let partition = partition_state(choices, cluster, model, perf, quanta)?;
    let shards = assign_unit_shards(&partition.ratios, model)?;
    let uneven = dp_uneven || shards.uneven_units > 0;

    let (ag, rs) = perf.collectives(uneven);
    let mut fwd = ag;
    let mut bwd = ag + rs;
    for (c, p) in choices.iter().zip(&perf.gpus) {
        if !c.is_idle() {
            fwd = fwd.max(p.fwd.total(c.microbatch, c.num_microbatches));
            bwd = bwd.max(p.bwd.total(c.microbatch, c.num_microbatches));
        }
    }
    let state = model.state_bytes();
    let assignments = cluster
        .gpus
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let c = choices[i];
            GpuAssignment {
                gpu_id: g.id.clone(),
                microbatch: c.microbatch,
                num_microbatches: c.num_microbatches,
                batch: c.batch(),
                state_ratio: partition.ratios[i],
                predicted_compute_mem_bytes: partition.compute_mem[i],
                predicted_state_mem_bytes: partition.ratios[i] * state,
            }
        })
        .collect();

    report.dp_assumed_uneven = dp_uneven;
    report.uneven_units = shards.uneven_units;
    report.partition_matches_dp_assumption = dp_uneven == (shards.uneven_units > 0);

    let (fwd, bwd) = (fwd.as_f64(), bwd.as_f64());
    Ok(TrainPlan {
        global_batch: model.global_batch,
        assignments,
        predicted_layer_fwd_ms: fwd,
        predicted_layer_bwd_ms: bwd,
        predicted_iteration_ms: model.layers as f64 * (fwd + bwd),
        dp_objective_ms: objective.as_f64(),
        uneven_sharding_used: uneven,
        unit_shards: Some(shards),
    })
}

/// Builds a plan for a fixed compute assignment, as the solvers do for their
/// optimum. The objective is the slowest active GPU's layer time.
pub fn plan_from_choices<T: Scalar>(
    cluster: &ClusterSpec,
    model: &ModelSpec,
    perf: &ClusterPerf<T>,
    choices: &[ComputeChoice],
    quanta: u32,
) -> Result<TrainPlan> {
    if choices.len() != cluster.len() {
        return Err(Error::DimensionMismatch {
            expected: cluster.len(),
            got: choices.len(),
        });
    }
    let mut objective = T::zero();
    for (i, c) in choices.iter().enumerate() {
        if !c.is_idle() {
            objective = objective
                .max(per_gpu_layer_latency(cluster, model, perf, i, c.microbatch, c.num_microbatches)?.total());
        }
    }
    let mut report = OptimizerReport::default();
    finish_plan(cluster, model, perf, choices, objective, quanta, &mut report)
}

/// Names the constraint that makes an instance infeasible before any search.
pub(crate) fn precheck<T: Scalar>(
    cluster: &ClusterSpec,
    model: &ModelSpec,
    perf: &ClusterPerf<T>,
    opts: &OptimizerOptions,
) -> Result<()> {
    cluster.validate()?;
    model.validate()?;
    if perf.gpus.len() != cluster.len() {
        return Err(Error::Validation("performance models do not match cluster".into()));
    }
    let n = cluster.len();
    if !opts.allow_idle && (model.global_batch as usize) < n {
        return Err(Error::infeasible(
            "I",
            format!(
                "global batch {} cannot give each of {n} GPUs at least one sample",
                model.global_batch
            ),
        ));
    }
    let mut any_fits = false;
    for i in 0..n {
        let cap = T::lit(cluster.effective_capacity(i));
        let fits = perf.gpus[i].memory.eval(1) <= cap;
        any_fits |= fits;
        if !fits && !opts.allow_idle {
            return Err(Error::infeasible(
                "II",
                format!(
                    "GPU {} cannot hold compute memory for a single sample",
                    cluster.gpus[i].id
                ),
            ));
        }
    }
    if !any_fits {
        return Err(Error::infeasible("II", "no GPU can hold compute memory for one sample"));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod testutil {
    use std::collections::BTreeMap;

    use crate::model::{ClusterSpec, CommProfile, GpuSpec, ModelSpec, GIB};
    use crate::perf::{ClusterPerf, GpuPerf, LatencyModel, MemoryModel};

    /// Cluster whose GPU `i` has affine forward latency `fwd_slope[i] * m + 0.5`
    /// and backward twice that, with capacity `cap_gib[i]` and fraction 1.0.
    pub fn synthetic(
        fwd_slope: &[f64],
        cap_gib: &[f64],
        ag: f64,
        rs: f64,
    ) -> (ClusterSpec, ClusterPerf<f64>) {
        let gpus = fwd_slope
            .iter()
            .zip(cap_gib)
            .enumerate()
            .map(|(i, (_, &c))| GpuSpec {
                id: format!("g{i}"),
                memory_capacity: (c * GIB) as u64,
                profile_key: format!("k{i}"),
            })
            .collect();
        let comm = CommProfile {
            allgather_even: ag,
            reducescatter_even: rs,
            uneven_overhead: 0.15,
        };
        let cluster = ClusterSpec::new(gpus, comm, 1.0).unwrap();
        let by_key: BTreeMap<String, GpuPerf<f64>> = fwd_slope
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                (
                    format!("k{i}"),
                    GpuPerf {
                        fwd: LatencyModel::affine(0.5, s),
                        bwd: LatencyModel::affine(1.0, 2.0 * s),
                        memory: MemoryModel {
                            slope: 0.5 * GIB,
                            intercept: 1.0 * GIB,
                        },
                    },
                )
            })
            .collect();
        let perf = ClusterPerf::new(&cluster, &by_key).unwrap();
        (cluster, perf)
    }

    pub fn small_model(batch: u32) -> ModelSpec {
        ModelSpec {
            layers: 4,
            params_per_layer: 1_000_000,
            bytes_per_param_state: 16,
            global_batch: batch,
        }
    }
}
