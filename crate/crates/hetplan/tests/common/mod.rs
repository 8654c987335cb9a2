#![allow(dead_code)]

use std::collections::BTreeMap;

use hetplan::perf::{ClusterPerf, GpuPerf, LatencyModel, MemoryModel};
use hetplan::{ClusterSpec, CommProfile, ComputeChoice, GpuSpec, ModelSpec, TrainPlan, GIB};

pub struct Setup {
    pub cluster: ClusterSpec,
    pub perf: ClusterPerf<f64>,
    pub model: ModelSpec,
}

/// GPU `i` has forward latency `fi[i] + fs[i] * m`, backward `ratio` times
/// that, compute memory `1 GiB + 0.1 GiB * m` and `cap_gib[i]` of capacity.
#[allow(clippy::too_many_arguments)]
pub fn setup(fs: &[f64], fi: &[f64], ratio: f64, cap_gib: &[f64], ag: f64, rs: f64, layers: u32, batch: u32) -> Setup {
    let n = fs.len();
    let gpus = (0..n)
        .map(|i| GpuSpec {
            id: format!("g{i}"),
            memory_capacity: (cap_gib[i] * GIB) as u64,
            profile_key: format!("k{i}"),
        })
        .collect();
    let comm = CommProfile {
        allgather_even: ag,
        reducescatter_even: rs,
        uneven_overhead: 0.15,
    };
    // Built directly so zero-latency collectives are allowed.
    let cluster = ClusterSpec {
        gpus,
        comm,
        mem_cap_fraction: 1.0,
    };
    let by_key: BTreeMap<String, GpuPerf<f64>> = (0..n)
        .map(|i| {
            (
                format!("k{i}"),
                GpuPerf {
                    fwd: LatencyModel::affine(fi[i], fs[i]),
                    bwd: LatencyModel::affine(fi[i] * ratio, fs[i] * ratio),
                    memory: MemoryModel {
                        slope: 0.1 * GIB,
                        intercept: GIB,
                    },
                },
            )
        })
        .collect();
    let perf = ClusterPerf::new(&cluster, &by_key).unwrap();
    let model = ModelSpec {
        layers,
        params_per_layer: 1_000_000,
        bytes_per_param_state: 16,
        global_batch: batch,
    };
    Setup {
        cluster,
        perf,
        model,
    }
}

pub fn uniform(n: usize, slope: f64, ag: f64, rs: f64, layers: u32, batch: u32) -> Setup {
    setup(&vec![slope; n], &vec![0.0; n], 2.0, &vec![64.0; n], ag, rs, layers, batch)
}

pub fn plan(s: &Setup, choices: &[(u32, u32)]) -> TrainPlan {
    let choices: Vec<ComputeChoice> = choices.iter().map(|&(m, l)| ComputeChoice::new(m, l)).collect();
    assert_eq!(choices.iter().map(|c| c.batch()).sum::<u32>(), s.model.global_batch);
    hetplan::plan_from_choices(&s.cluster, &s.model, &s.perf, &choices, 1024).unwrap()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}
