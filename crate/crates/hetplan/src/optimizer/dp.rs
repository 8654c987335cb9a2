use std::time::Instant;

use rayon::prelude::*;

use super::{
    aggregate_fits, complexity_budget, finish_plan, precheck, ComputeChoice, GpuCostTable,
    OptimizerOptions, OptimizerReport, Optimized,
};
use crate::error::{Error, Result};
use crate::model::{ClusterSpec, ModelSpec};
use crate::perf::ClusterPerf;
use crate::scalar::Scalar;

const UNREACHED: u32 = 0;
const IDLE: u32 = 1;

#[inline]
fn pack(m: u32, l: u32) -> u32 {
    (m << 16) | l
}

#[inline]
fn unpack(c: u32) -> ComputeChoice {
    if c == IDLE {
        ComputeChoice::IDLE
    } else {
        ComputeChoice::new(c >> 16, c & 0xffff)
    }
}

#[derive(Default, Clone, Copy)]
struct Counters {
    transitions: u64,
    reachable: u64,
    pruned_memory: u64,
    pruned_dominance: u64,
}

impl std::ops::Add for Counters {
    type Output = Counters;
    fn add(self, o: Counters) -> Counters {
        Counters {
            transitions: self.transitions + o.transitions,
            reachable: self.reachable + o.reachable,
            pruned_memory: self.pruned_memory + o.pruned_memory,
            pruned_dominance: self.pruned_dominance + o.pruned_dominance,
        }
    }
}

/// Fills row `j` of layer `i` from the previous layer's slab.
#[allow(clippy::too_many_arguments)]
fn fill_row<T: Scalar>(
    table: &GpuCostTable<T>,
    prev: &[T],
    width: usize,
    j: usize,
    row: &mut [T],
    choice_row: &mut [u32],
    opts: &OptimizerOptions,
) -> Counters {
    let mut ctr = Counters::default();
    for k in 0..=j {
        let mut best = T::infinity();
        let mut pick = UNREACHED;
        let m_hi = (k as u32).min(table.max_micro);
        ctr.pruned_memory += (k as u32 - m_hi) as u64;
        for m in 1..=m_hi {
            let kp = k - m as usize;
            let l_hi = ((j - kp) / m as usize) as u32;
            for l in 1..=l_hi {
                let t = table.cost(m, l);
                if opts.dominance_pruning && t >= best {
                    ctr.pruned_dominance += (l_hi - l + 1) as u64;
                    break;
                }
                ctr.transitions += 1;
                let jp = j - (l * m) as usize;
                let r = prev[jp * width + kp].max(t);
                if r < best {
                    best = r;
                    pick = pack(m, l);
                }
            }
        }
        if opts.allow_idle {
            let d = prev[j * width + k];
            if d < best {
                best = d;
                pick = IDLE;
            }
        }
        if pick != UNREACHED {
            ctr.reachable += 1;
        }
        row[k] = best;
        choice_row[k] = pick;
    }
    ctr
}

/// Exact minimization of the slowest GPU's per-layer time over all
/// `(m_i, l_i)` assignments with `sum m_i * l_i = B`.
///
/// `D[i][j][k]` is the best objective using the first `i` GPUs, batch mass
/// `j` and microbatch mass `k`. Among optimal final cells the smallest `k`
/// passing the aggregate memory bound wins. Results are identical for any
/// thread count.
pub fn dp_optimize<T: Scalar>(
    cluster: &ClusterSpec,
    model: &ModelSpec,
    perf: &ClusterPerf<T>,
    opts: &OptimizerOptions,
) -> Result<Optimized<T>> {
    let started = Instant::now();
    precheck(cluster, model, perf, opts)?;
    let n = cluster.len();
    let batch = model.global_batch;
    let width = batch as usize + 1;
    let cells = width * width;

    let tables: Vec<GpuCostTable<T>> = (0..n)
        .map(|i| GpuCostTable::new(cluster, model, perf, i, batch))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    let threads = pool.current_num_threads();

    let mut prev = vec![T::infinity(); cells];
    prev[0] = T::zero();
    let mut cur = vec![T::infinity(); cells];
    let mut choices = vec![UNREACHED; n * cells];
    let mut total = Counters::default();

    for (i, table) in tables.iter().enumerate() {
        let layer_choices = &mut choices[i * cells..(i + 1) * cells];
        let prev_ref = &prev;
        total = total
            + pool.install(|| {
                cur.par_chunks_mut(width)
                    .zip(layer_choices.par_chunks_mut(width))
                    .enumerate()
                    .map(|(j, (row, crow))| fill_row(table, prev_ref, width, j, row, crow, opts))
                    .reduce(Counters::default, |a, b| a + b)
            });
        std::mem::swap(&mut prev, &mut cur);
    }

    let final_row = &prev[batch as usize * width..];
    let mut best: Option<(T, usize)> = None;
    let mut any_finite = false;
    for (k, &v) in final_row.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        any_finite = true;
        if !aggregate_fits(cluster, model, perf, k as u32) {
            continue;
        }
        if best.is_none_or(|(b, _)| v < b) {
            best = Some((v, k));
        }
    }
    let (objective, k_best) = match best {
        Some(b) => b,
        None if any_finite => {
            return Err(Error::infeasible(
                "III",
                "aggregate compute memory plus training state exceeds total effective capacity for every batch assignment",
            ))
        }
        None => {
            return Err(Error::infeasible(
                "II",
                format!("no per-GPU assignment of batch {batch} fits compute memory"),
            ))
        }
    };

    let mut assigned = vec![ComputeChoice::IDLE; n];
    let (mut j, mut k) = (batch as usize, k_best);
    for i in (0..n).rev() {
        let c = unpack(choices[i * cells + j * width + k]);
        debug_assert!(choices[i * cells + j * width + k] != UNREACHED);
        assigned[i] = c;
        j -= c.batch() as usize;
        k -= c.microbatch as usize;
    }
    debug_assert!(j == 0 && k == 0);

    let mut report = OptimizerReport {
        solver: "dp".into(),
        gpus: n,
        global_batch: batch,
        threads,
        estimated_transitions: complexity_budget(n, batch),
        transitions: total.transitions,
        reachable_states: total.reachable,
        pruned_memory: total.pruned_memory,
        pruned_dominance: total.pruned_dominance,
        best_micro_mass: k_best as u32,
        ..Default::default()
    };
    let plan = finish_plan(
        cluster,
        model,
        perf,
        &assigned,
        objective,
        opts.partition_quanta,
        &mut report,
    )?;
    report.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(Optimized {
        plan,
        choices: assigned,
        objective,
        report,
    })
}
