//! Plan validation against a cluster, model and performance models.

use std::fmt;

use serde::Serialize;

use crate::model::{ClusterSpec, ModelSpec, TrainPlan};
use crate::perf::ClusterPerf;
use crate::scalar::Scalar;
use crate::sharding::RATIO_SUM_TOLERANCE;

/// Relative slack on per-GPU capacity checks for floating-point rounding.
pub const CAPACITY_TOLERANCE_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Constraint {
    /// Every cluster GPU appears exactly once, in cluster order.
    Coverage,
    /// `b = m * l` with `m, l >= 1`, or an idle GPU with all three zero.
    Structure,
    /// Per-GPU batches sum to the global batch.
    BatchSum,
    /// Compute memory of each active GPU fits its effective capacity.
    ComputeMemory,
    /// Total compute memory plus training state fits the cluster.
    AggregateMemory,
    /// State ratios lie in [0, 1] and sum to 1.
    StateRatio,
    /// Compute memory plus state share fits each GPU.
    GpuMemory,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Constraint::Coverage => "coverage",
            Constraint::Structure => "structure",
            Constraint::BatchSum => "I (batch sum)",
            Constraint::ComputeMemory => "II (compute memory)",
            Constraint::AggregateMemory => "III (aggregate memory)",
            Constraint::StateRatio => "state ratio",
            Constraint::GpuMemory => "per-GPU memory",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub constraint: Constraint,
    pub gpu: Option<String>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.gpu {
            Some(g) => write!(f, "[{}] GPU {g}: {}", self.constraint, self.detail),
            None => write!(f, "[{}] {}", self.constraint, self.detail),
        }
    }
}

/// Returns every violated constraint; an empty list means the plan is valid.
pub fn validate_plan<T: Scalar>(
    plan: &TrainPlan,
    cluster: &ClusterSpec,
    model: &ModelSpec,
    perf: &ClusterPerf<T>,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |constraint, gpu: Option<&str>, detail: String| {
        out.push(Violation {
            constraint,
            gpu: gpu.map(str::to_owned),
            detail,
        })
    };

    let ids: Vec<&str> = plan.assignments.iter().map(|a| a.gpu_id.as_str()).collect();
    let expected: Vec<&str> = cluster.gpus.iter().map(|g| g.id.as_str()).collect();
    if ids != expected {
        push(
            Constraint::Coverage,
            None,
            format!("assignments {ids:?} do not match cluster GPUs {expected:?}"),
        );
        return out;
    }
    if plan.global_batch != model.global_batch {
        push(
            Constraint::BatchSum,
            None,
            format!(
                "plan global batch {} differs from model global batch {}",
                plan.global_batch, model.global_batch
            ),
        );
    }

    let state = model.state_bytes();
    let mut batch_sum: u64 = 0;
    let mut ratio_sum = 0.0;
    let mut compute_total = 0.0;
    for (i, a) in plan.assignments.iter().enumerate() {
        let id = Some(a.gpu_id.as_str());
        let cap = cluster.effective_capacity(i);
        batch_sum += a.batch as u64;
        ratio_sum += a.state_ratio;

        let idle = a.microbatch == 0 && a.num_microbatches == 0 && a.batch == 0;
        let active = a.microbatch >= 1
            && a.num_microbatches >= 1
            && a.batch as u64 == a.microbatch as u64 * a.num_microbatches as u64;
        if !idle && !active {
            push(
                Constraint::Structure,
                id,
                format!(
                    "batch {} is not microbatch {} x count {}",
                    a.batch, a.microbatch, a.num_microbatches
                ),
            );
            continue;
        }

        let compute = if active {
            perf.gpus[i].memory.eval(a.microbatch).as_f64()
        } else {
            0.0
        };
        compute_total += compute;
        if compute > cap {
            push(
                Constraint::ComputeMemory,
                id,
                format!("compute memory {compute:.0} B exceeds capacity {cap:.0} B"),
            );
        }
        if !(0.0..=1.0 + RATIO_SUM_TOLERANCE).contains(&a.state_ratio) {
            push(
                Constraint::StateRatio,
                id,
                format!("state ratio {} outside [0, 1]", a.state_ratio),
            );
        }
        let held = compute + a.state_ratio * state;
        if held > cap * (1.0 + CAPACITY_TOLERANCE_REL) {
            push(
                Constraint::GpuMemory,
                id,
                format!("compute plus state {held:.0} B exceeds capacity {cap:.0} B"),
            );
        }
    }

    if batch_sum != model.global_batch as u64 {
        push(
            Constraint::BatchSum,
            None,
            format!("batches sum to {batch_sum}, expected {}", model.global_batch),
        );
    }
    if (ratio_sum - 1.0).abs() > RATIO_SUM_TOLERANCE {
        push(
            Constraint::StateRatio,
            None,
            format!("state ratios sum to {ratio_sum}"),
        );
    }
    let total_cap = cluster.total_effective_capacity();
    if compute_total + state > total_cap {
        push(
            Constraint::AggregateMemory,
            None,
            format!(
                "compute {compute_total:.0} B plus state {state:.0} B exceeds total capacity {total_cap:.0} B"
            ),
        );
    }
    out
}
