use std::time::Instant;

use super::{
    aggregate_fits, complexity_budget, finish_plan, precheck, ComputeChoice, GpuCostTable,
    OptimizerOptions, OptimizerReport, Optimized,
};
use crate::error::{Error, Result};
use crate::model::{ClusterSpec, ModelSpec};
use crate::perf::ClusterPerf;
use crate::scalar::Scalar;

pub const BRUTE_FORCE_MAX_GPUS: usize = 5;
pub const BRUTE_FORCE_MAX_BATCH: u32 = 16;

struct Search<'a, T> {
    tables: &'a [GpuCostTable<T>],
    allow_idle: bool,
    current: Vec<ComputeChoice>,
    best: Option<(T, u32, Vec<ComputeChoice>)>,
    leaves: u64,
    accept: &'a dyn Fn(u32) -> bool,
}

impl<T: Scalar> Search<'_, T> {
    fn key(choices: &[ComputeChoice]) -> Vec<(u32, u32)> {
        choices
            .iter()
            .rev()
            .map(|c| (c.microbatch, c.num_microbatches))
            .collect()
    }

    fn offer(&mut self, objective: T, k: u32) {
        self.leaves += 1;
        if !(self.accept)(k) {
            return;
        }
        let better = match &self.best {
            None => true,
            Some((b, bk, bc)) => {
                objective < *b
                    || (objective == *b
                        && (k < *bk
                            || (k == *bk && Self::key(&self.current) < Self::key(bc))))
            }
        };
        if better {
            self.best = Some((objective, k, self.current.clone()));
        }
    }

    fn go(&mut self, i: usize, left: u32, objective: T, k: u32) {
        if i == self.tables.len() {
            if left == 0 {
                self.offer(objective, k);
            }
            return;
        }
        if self.allow_idle {
            self.current.push(ComputeChoice::IDLE);
            self.go(i + 1, left, objective, k);
            self.current.pop();
        }
        let table = &self.tables[i];
        for m in 1..=table.max_micro.min(left) {
            for l in 1..=left / m {
                let t = table.cost(m, l);
                self.current.push(ComputeChoice::new(m, l));
                self.go(i + 1, left - m * l, objective.max(t), k + m);
                self.current.pop();
            }
        }
    }
}

/// Exhaustive reference solver. Ties break to the smallest microbatch mass,
/// then lexicographically on `(m_N, l_N, m_{N-1}, ...)`.
pub fn brute_force_optimize<T: Scalar>(
    cluster: &ClusterSpec,
    model: &ModelSpec,
    perf: &ClusterPerf<T>,
    opts: &OptimizerOptions,
) -> Result<Optimized<T>> {
    let started = Instant::now();
    let n = cluster.len();
    let batch = model.global_batch;
    if n > BRUTE_FORCE_MAX_GPUS || batch > BRUTE_FORCE_MAX_BATCH {
        return Err(Error::SizeGuard(format!(
            "{n} GPUs and batch {batch} exceed the limits of {BRUTE_FORCE_MAX_GPUS} GPUs and batch {BRUTE_FORCE_MAX_BATCH}"
        )));
    }
    precheck(cluster, model, perf, opts)?;
    let tables: Vec<GpuCostTable<T>> = (0..n)
        .map(|i| GpuCostTable::new(cluster, model, perf, i, batch))
        .collect();
    let accept = |k: u32| aggregate_fits(cluster, model, perf, k);
    let mut search = Search {
        tables: &tables,
        allow_idle: opts.allow_idle,
        current: Vec::with_capacity(n),
        best: None,
        leaves: 0,
        accept: &accept,
    };
    search.go(0, batch, T::zero(), 0);
    let leaves = search.leaves;
    let (objective, k, choices) = search.best.ok_or_else(|| {
        Error::infeasible(
            if leaves > 0 { "III" } else { "II" },
            "no assignment satisfies the memory constraints",
        )
    })?;

    let mut report = OptimizerReport {
        solver: "brute-force".into(),
        gpus: n,
        global_batch: batch,
        threads: 1,
        estimated_transitions: complexity_budget(n, batch),
        transitions: leaves,
        reachable_states: leaves,
        best_micro_mass: k,
        ..Default::default()
    };
    let plan = finish_plan(
        cluster,
        model,
        perf,
        &choices,
        objective,
        opts.partition_quanta,
        &mut report,
    )?;
    report.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(Optimized {
        plan,
        choices,
        objective,
        report,
    })
}
