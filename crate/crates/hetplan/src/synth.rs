//! Seeded random planning instances.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{ClusterSpec, CommProfile, GpuSpec, ModelSpec, TrainPlan, GIB};
use crate::optimizer::{brute_force_optimize, dp_optimize, OptimizerOptions};
use crate::perf::{ClusterPerf, GpuPerf, LatencyModel, MemoryModel};
use crate::validate::validate_plan;

#[derive(Debug, Clone)]
pub struct Instance {
    pub cluster: ClusterSpec,
    pub model: ModelSpec,
    pub perf: ClusterPerf<f64>,
    pub models_by_key: BTreeMap<String, GpuPerf<f64>>,
}

fn assemble(
    gpus: Vec<GpuSpec>,
    comm: CommProfile,
    cap_fraction: f64,
    model: ModelSpec,
    models_by_key: BTreeMap<String, GpuPerf<f64>>,
) -> Instance {
    let cluster = ClusterSpec::new(gpus, comm, cap_fraction).expect("generated cluster is valid");
    let perf = ClusterPerf::new(&cluster, &models_by_key).expect("generated models are valid");
    Instance {
        cluster,
        model,
        perf,
        models_by_key,
    }
}

/// Small instance with 1..=4 GPUs and batch 2..=12. Affine latency and
/// memory models; capacities and state size are drawn so that a share of
/// instances is infeasible.
pub fn oracle_instance(rng: &mut impl Rng) -> Instance {
    let n = rng.gen_range(1..=4usize);
    let batch = rng.gen_range(2..=12u32);
    let slope = rng.gen_range(0.2..1.0) * GIB;
    let mut gpus = Vec::new();
    let mut by_key = BTreeMap::new();
    for i in 0..n {
        let key = format!("p{i}");
        let fs = rng.gen_range(0.5..10.0);
        let bs = fs * rng.gen_range(1.5..3.0);
        by_key.insert(
            key.clone(),
            GpuPerf {
                fwd: LatencyModel::affine(rng.gen_range(0.0..2.0), fs),
                bwd: LatencyModel::affine(rng.gen_range(0.0..4.0), bs),
                memory: MemoryModel {
                    slope: slope * rng.gen_range(1.0..1.04),
                    intercept: rng.gen_range(0.5..3.0) * GIB,
                },
            },
        );
        gpus.push(GpuSpec {
            id: format!("gpu{i}"),
            memory_capacity: (rng.gen_range(1.5..10.0) * GIB) as u64,
            profile_key: key,
        });
    }
    let comm = CommProfile {
        allgather_even: rng.gen_range(0.0..20.0),
        reducescatter_even: rng.gen_range(0.0..20.0),
        uneven_overhead: 0.15,
    };
    let layers = rng.gen_range(1..=8u32);
    let state_gib = rng.gen_range(0.0..6.0) * n as f64;
    let model = ModelSpec {
        layers,
        params_per_layer: ((state_gib * GIB / 16.0 / layers as f64) as u64).max(1),
        bytes_per_param_state: 16,
        global_batch: batch,
    };
    assemble(gpus, comm, rng.gen_range(0.7..=1.0), model, by_key)
}

/// Instance where every GPU's per-layer compute dominates communication.
/// Backward/forward latency ratios are shared so the slowest GPU is the same
/// in both passes.
pub fn compute_bound_instance(rng: &mut impl Rng) -> Instance {
    let n = rng.gen_range(1..=4usize);
    let batch = rng.gen_range(n as u32..=24u32.max(n as u32));
    let bwd_ratio = rng.gen_range(1.5..3.0);
    let mut gpus = Vec::new();
    let mut by_key = BTreeMap::new();
    let mut min_slope = f64::INFINITY;
    for i in 0..n {
        let key = format!("p{i}");
        let fs = rng.gen_range(1.0..10.0);
        let fi = rng.gen_range(0.0..2.0);
        min_slope = min_slope.min(fs);
        by_key.insert(
            key.clone(),
            GpuPerf {
                fwd: LatencyModel::affine(fi, fs),
                bwd: LatencyModel::affine(fi * bwd_ratio, fs * bwd_ratio),
                memory: MemoryModel {
                    slope: 0.1 * GIB,
                    intercept: 1.0 * GIB,
                },
            },
        );
        gpus.push(GpuSpec {
            id: format!("gpu{i}"),
            memory_capacity: (64.0 * GIB) as u64,
            profile_key: key,
        });
    }
    let comm = CommProfile {
        allgather_even: rng.gen_range(0.01..0.1) * min_slope,
        reducescatter_even: rng.gen_range(0.01..0.1) * min_slope,
        uneven_overhead: 0.15,
    };
    let model = ModelSpec {
        layers: rng.gen_range(8..=48u32),
        params_per_layer: 1_000_000,
        bytes_per_param_state: 16,
        global_batch: batch,
    };
    assemble(gpus, comm, 1.0, model, by_key)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct OracleOutcome {
    pub seed: u64,
    pub instances: usize,
    pub feasible: usize,
    pub infeasible: usize,
    pub mismatches: Vec<String>,
    pub violations: Vec<String>,
    #[serde(skip)]
    pub plans: Vec<TrainPlan>,
}

impl OracleOutcome {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.violations.is_empty()
    }
}

/// Runs the DP and the exhaustive solver on `count` seeded instances and
/// validates every emitted plan.
pub fn run_oracle(seed: u64, count: usize) -> Result<OracleOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OracleOutcome {
        seed,
        instances: count,
        ..Default::default()
    };
    for idx in 0..count {
        let inst = oracle_instance(&mut rng);
        let opts = OptimizerOptions {
            allow_idle: rng.gen_bool(0.3),
            threads: 1,
            ..Default::default()
        };
        let dp = dp_optimize(&inst.cluster, &inst.model, &inst.perf, &opts);
        let bf = brute_force_optimize(&inst.cluster, &inst.model, &inst.perf, &opts);
        match (dp, bf) {
            (Ok(d), Ok(b)) => {
                out.feasible += 1;
                let rel = (d.objective - b.objective).abs() / b.objective.abs().max(f64::MIN_POSITIVE);
                if rel > 1e-9 {
                    out.mismatches.push(format!(
                        "instance {idx}: dp {} vs brute force {}",
                        d.objective, b.objective
                    ));
                }
                for plan in [&d.plan, &b.plan] {
                    for v in validate_plan(plan, &inst.cluster, &inst.model, &inst.perf) {
                        out.violations.push(format!("instance {idx}: {v}"));
                    }
                }
                out.plans.push(d.plan);
            }
            (Err(d), Err(b)) if d.is_infeasible() && b.is_infeasible() => out.infeasible += 1,
            (d, b) => out.mismatches.push(format!(
                "instance {idx}: verdicts differ (dp {}, brute force {})",
                verdict(&d.map(|o| o.objective)),
                verdict(&b.map(|o| o.objective))
            )),
        }
    }
    Ok(out)
}

fn verdict(r: &Result<f64>) -> String {
    match r {
        Ok(v) => format!("feasible {v}"),
        Err(e) => e.to_string(),
    }
}
