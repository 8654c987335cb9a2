use serde::Serialize;

use super::ComputeChoice;
use crate::error::{Error, Result};
use crate::model::{ClusterSpec, ModelSpec};
use crate::perf::ClusterPerf;
use crate::scalar::Scalar;

pub const DEFAULT_PARTITION_QUANTA: u32 = 1024;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatePartition {
    pub ratios: Vec<f64>,
    pub quanta: Vec<u32>,
    /// Predicted compute memory per GPU in bytes (0 for idle GPUs).
    pub compute_mem: Vec<f64>,
    /// `(compute + state) / effective capacity` per GPU.
    pub utilization: Vec<f64>,
}

impl StatePartition {
    pub fn max_utilization(&self) -> f64 {
        self.utilization.iter().copied().fold(0.0, f64::max)
    }
}

/// State bytes held by a GPU owning `n` of `total` quanta.
#[inline]
pub(crate) fn quanta_bytes(n: u32, total: u32, state: f64) -> f64 {
    (n as f64 / total as f64) * state
}

/// Places `total` equal quanta of `state` bytes one at a time on the GPU with
/// the lowest current utilization that can still fit one more, ties to the
/// lowest index. Returns the per-GPU counts and the number left unplaced.
fn place_quanta(compute: &[f64], caps: &[f64], state: f64, total: u32) -> (Vec<u32>, u32) {
    let n = compute.len();
    let mut held = vec![0u32; n];
    for placed in 0..total {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if compute[i] + quanta_bytes(held[i] + 1, total, state) > caps[i] {
                continue;
            }
            let util = (compute[i] + quanta_bytes(held[i], total, state)) / caps[i];
            if best.is_none_or(|(_, u)| util < u) {
                best = Some((i, util));
            }
        }
        match best {
            Some((i, _)) => held[i] += 1,
            None => return (held, total - placed),
        }
    }
    (held, 0)
}

/// Quantized greedy placement; `None` when some quantum fits nowhere.
pub fn greedy_quanta(compute: &[f64], caps: &[f64], state: f64, total: u32) -> Option<Vec<u32>> {
    match place_quanta(compute, caps, state, total) {
        (held, 0) => Some(held),
        _ => None,
    }
}

/// Splits the training state across GPUs given their compute assignment.
pub fn partition_state<T: Scalar>(
    choices: &[ComputeChoice],
    cluster: &ClusterSpec,
    model: &ModelSpec,
    perf: &ClusterPerf<T>,
    quanta: u32,
) -> Result<StatePartition> {
    let n = cluster.len();
    if choices.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: choices.len(),
        });
    }
    if quanta == 0 {
        return Err(Error::Validation("partition needs at least one quantum".into()));
    }
    let compute: Vec<f64> = choices
        .iter()
        .zip(&perf.gpus)
        .map(|(c, p)| {
            if c.is_idle() {
                0.0
            } else {
                p.memory.eval(c.microbatch).as_f64()
            }
        })
        .collect();
    let caps: Vec<f64> = (0..n).map(|i| cluster.effective_capacity(i)).collect();
    let state = model.state_bytes();
    let (held, unplaced) = place_quanta(&compute, &caps, state, quanta);
    let mut ratios: Vec<f64> = held.iter().map(|&q| q as f64 / quanta as f64).collect();
    if unplaced > 0 {
        // Leftover rooms are each smaller than a quantum: split the rest
        // continuously in proportion to room.
        let rest = quanta_bytes(unplaced, quanta, state);
        let room: Vec<f64> = (0..n)
            .map(|i| (caps[i] - compute[i] - quanta_bytes(held[i], quanta, state)).max(0.0))
            .collect();
        let total_room: f64 = room.iter().sum();
        if total_room < rest {
            return Err(Error::infeasible(
                "state partition",
                "training state does not fit next to the chosen compute assignment",
            ));
        }
        for i in 0..n {
            ratios[i] += rest * (room[i] / total_room) / state;
        }
    }

    let even = 1.0 / n as f64;
    let near_even = ratios
        .iter()
        .all(|&r| (r - even).abs() <= 1.0 / quanta as f64);
    let even_fits = (0..n).all(|i| compute[i] + even * state <= caps[i]);
    if near_even && even_fits {
        ratios = vec![even; n];
    }
    let utilization = (0..n)
        .map(|i| (compute[i] + ratios[i] * state) / caps[i])
        .collect();
    Ok(StatePartition {
        ratios,
        quanta: held,
        compute_mem: compute,
        utilization,
    })
}
