//! Discrete-event simulation of one training iteration.

pub mod engine;
mod schedule;
pub mod trace;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ClusterSpec, ModelSpec, TrainPlan};
use crate::perf::{collective_latency, ClusterPerf};
use crate::validate::validate_plan;
use engine::Edge;
use schedule::{build, BufKind, GpuWork};
pub use trace::{lint_trace, to_chrome_trace, to_jsonl, Event, EventKind, TaskRecord};

pub const DEFAULT_ACTIVATION_BYTES_PER_SAMPLE: f64 = 1024.0 * 1024.0;
pub const DEFAULT_RECOMPUTE_FACTOR: f64 = 1.0;

#[derive(Debug, Clone, Copy)]
pub struct SimConfig<'a> {
    pub plan: &'a TrainPlan,
    pub cluster: &'a ClusterSpec,
    pub model: &'a ModelSpec,
    pub perf: &'a ClusterPerf<f64>,
    /// Host link bandwidth in bytes per millisecond; `f64::INFINITY` allowed.
    pub offload_bandwidth: f64,
    pub activation_bytes_per_sample: f64,
    pub offload_enabled: bool,
    /// Recomputation cost as a multiple of the forward latency.
    pub recompute_factor: f64,
}

impl<'a> SimConfig<'a> {
    /// Offload on, infinite bandwidth, default activation size and recompute.
    pub fn new(
        plan: &'a TrainPlan,
        cluster: &'a ClusterSpec,
        model: &'a ModelSpec,
        perf: &'a ClusterPerf<f64>,
    ) -> Self {
        SimConfig {
            plan,
            cluster,
            model,
            perf,
            offload_bandwidth: f64::INFINITY,
            activation_bytes_per_sample: DEFAULT_ACTIVATION_BYTES_PER_SAMPLE,
            offload_enabled: true,
            recompute_factor: DEFAULT_RECOMPUTE_FACTOR,
        }
    }

    fn check(&self) -> Result<()> {
        if self.offload_enabled && !(self.offload_bandwidth > 0.0) {
            return Err(Error::Validation("offload bandwidth must be > 0".into()));
        }
        if !(self.activation_bytes_per_sample >= 0.0) || !(self.recompute_factor >= 0.0) {
            return Err(Error::Validation(
                "activation size and recompute factor must be >= 0".into(),
            ));
        }
        let violations = validate_plan(self.plan, self.cluster, self.model, self.perf);
        if let Some(v) = violations.first() {
            return Err(Error::InvalidPlan(format!(
                "{v} ({} violation(s))",
                violations.len()
            )));
        }
        Ok(())
    }

    fn work(&self) -> Vec<GpuWork> {
        self.plan
            .assignments
            .iter()
            .zip(&self.perf.gpus)
            .map(|(a, p)| {
                if a.is_idle() {
                    return GpuWork {
                        count: 0,
                        fwd_ms: 0.0,
                        bwd_ms: 0.0,
                        recompute_ms: 0.0,
                        offload: false,
                        buffer_bytes: 0.0,
                        transfer_ms: 0.0,
                    };
                }
                let f = p.fwd.eval(a.microbatch);
                let bytes = a.microbatch as f64 * self.activation_bytes_per_sample;
                GpuWork {
                    count: a.num_microbatches,
                    fwd_ms: f,
                    bwd_ms: p.bwd.eval(a.microbatch),
                    recompute_ms: self.recompute_factor * f,
                    offload: self.offload_enabled && a.num_microbatches >= 2,
                    buffer_bytes: bytes,
                    transfer_ms: bytes / self.offload_bandwidth,
                }
            })
            .collect()
    }

    /// Per-unit collective latencies. Every unit pays the uneven overhead
    /// when the plan uses uneven sharding anywhere.
    fn collectives(&self) -> (Vec<f64>, Vec<f64>) {
        let (ag, rs) = collective_latency::<f64>(&self.cluster.comm, self.plan.uneven_sharding_used);
        let layers = self.model.layers as usize;
        (vec![ag; layers], vec![rs; layers])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub iteration_ms: f64,
    pub per_layer_fwd_ms: f64,
    pub per_layer_bwd_ms: f64,
    /// Max of fitted compute memory plus state share and the explicit buffer ledger.
    pub peak_gpu_memory: Vec<f64>,
    pub peak_cpu_buffer: Vec<f64>,
    /// Largest boundary-activation residency of any single unit, per GPU.
    pub peak_activation_residency: Vec<f64>,
    /// Largest total of resident activation and gradient buffers, per GPU.
    pub peak_buffer_bytes: Vec<f64>,
    pub exposed_comm_ms: f64,
    pub exposed_transfer_ms: f64,
    pub trace: Vec<Event>,
    #[serde(skip)]
    pub tasks: Vec<TaskRecord>,
}

impl SimResult {
    /// Sum of compute-event durations per GPU, in cluster order.
    pub fn compute_time(&self, gpu_ids: &[String]) -> Vec<f64> {
        gpu_ids
            .iter()
            .map(|id| {
                self.trace
                    .iter()
                    .filter(|e| e.kind.is_compute() && &e.gpu_id == id)
                    .map(|e| e.end - e.start)
                    .sum()
            })
            .collect()
    }

    pub fn summary(&self) -> SimSummary {
        SimSummary {
            iteration_ms: self.iteration_ms,
            per_layer_fwd_ms: self.per_layer_fwd_ms,
            per_layer_bwd_ms: self.per_layer_bwd_ms,
            peak_gpu_memory: self.peak_gpu_memory.clone(),
            peak_cpu_buffer: self.peak_cpu_buffer.clone(),
            peak_activation_residency: self.peak_activation_residency.clone(),
            exposed_comm_ms: self.exposed_comm_ms,
            exposed_transfer_ms: self.exposed_transfer_ms,
            events: self.trace.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSummary {
    pub iteration_ms: f64,
    pub per_layer_fwd_ms: f64,
    pub per_layer_bwd_ms: f64,
    pub peak_gpu_memory: Vec<f64>,
    pub peak_cpu_buffer: Vec<f64>,
    pub peak_activation_residency: Vec<f64>,
    pub exposed_comm_ms: f64,
    pub exposed_transfer_ms: f64,
    pub events: usize,
}

/// Peak of a set of `[alloc, free)` intervals; frees apply before allocs at
/// equal times.
fn peak_of(mut points: Vec<(f64, f64)>) -> f64 {
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (mut cur, mut peak) = (0.0f64, 0.0f64);
    for (_, delta) in points {
        cur += delta;
        peak = peak.max(cur);
    }
    peak
}

/// Total length of the union of intervals.
fn union_length(mut iv: Vec<(f64, f64)>) -> f64 {
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (s, e) in iv {
        match cur {
            Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                cur = Some((s, e));
            }
            None => cur = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = cur {
        total += ce - cs;
    }
    total
}

pub fn simulate_iteration(cfg: &SimConfig<'_>) -> Result<SimResult> {
    cfg.check()?;
    let work = cfg.work();
    let (ag, rs) = cfg.collectives();
    let layers = cfg.model.layers as usize;
    let sched = build(&work, cfg.model.layers, &ag, &rs);
    let timing = sched.engine.run();
    let tasks_raw = sched.engine.tasks();
    let n = cfg.cluster.len();
    let at = |e: Edge| timing.at(e);

    let tasks: Vec<TaskRecord> = tasks_raw
        .iter()
        .enumerate()
        .map(|(id, t)| TaskRecord {
            kind: t.payload.kind,
            gpu: t.payload.gpu,
            unit: t.payload.unit,
            microbatch: t.payload.micro,
            resource: t.resource,
            start: timing.start[id],
            end: timing.end[id],
            deps: t.deps.clone(),
        })
        .collect();

    let ids: Vec<&String> = cfg.cluster.gpus.iter().map(|g| &g.id).collect();
    let mut trace = Vec::new();
    for (id, t) in tasks.iter().enumerate() {
        let gpus: Vec<usize> = match t.gpu {
            Some(g) => vec![g],
            None => (0..n).collect(),
        };
        for g in gpus {
            trace.push(Event {
                task: id,
                gpu_id: ids[g].clone(),
                kind: t.kind,
                unit: t.unit,
                microbatch: t.microbatch,
                start: t.start,
                end: t.end,
            });
        }
    }
    trace.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.task.cmp(&b.task)).then(a.gpu_id.cmp(&b.gpu_id)));

    let iteration_ms = timing.makespan();

    // Per-layer latencies from the slowest GPU's unit completion times.
    let active: Vec<usize> = (0..n).filter(|&g| work[g].is_active()).collect();
    let unit_end = |ids: &Vec<Vec<usize>>, u: usize| {
        active
            .iter()
            .map(|&g| {
                let l = work[g].count as usize;
                timing.end[ids[g][u * l + l - 1]]
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let (per_layer_fwd_ms, per_layer_bwd_ms) = if layers >= 2 {
        let span = (layers - 1) as f64;
        (
            (unit_end(&sched.fwd, layers - 1) - unit_end(&sched.fwd, 0)) / span,
            (unit_end(&sched.bwd, 0) - unit_end(&sched.bwd, layers - 1)) / span,
        )
    } else {
        let fwd_end = unit_end(&sched.fwd, 0);
        (fwd_end - ag[0], unit_end(&sched.bwd, 0) - fwd_end)
    };

    // Buffer ledger.
    let mut act_unit: Vec<f64> = vec![0.0; n];
    let mut gpu_points: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n];
    let mut cpu_points: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n];
    let mut unit_points: std::collections::BTreeMap<(usize, u32), Vec<(f64, f64)>> =
        Default::default();
    for s in &sched.spans {
        let pts = [(at(s.alloc), s.bytes), (at(s.free), -s.bytes)];
        if s.on_cpu {
            cpu_points[s.gpu].extend(pts);
            continue;
        }
        gpu_points[s.gpu].extend(pts);
        if s.kind == BufKind::Act {
            unit_points.entry((s.gpu, s.consumer)).or_default().extend(pts);
        }
    }
    for ((g, _), pts) in unit_points {
        act_unit[g] = act_unit[g].max(peak_of(pts));
    }
    let peak_buffer_bytes: Vec<f64> = gpu_points.into_iter().map(peak_of).collect();
    let peak_cpu_buffer: Vec<f64> = cpu_points.into_iter().map(peak_of).collect();
    let state = cfg.model.state_bytes();
    let peak_gpu_memory = cfg
        .plan
        .assignments
        .iter()
        .enumerate()
        .map(|(g, a)| {
            let share = a.state_ratio * state;
            let compute = if a.is_idle() {
                0.0
            } else {
                cfg.perf.gpus[g].memory.eval(a.microbatch)
            };
            (compute + share).max(share + peak_buffer_bytes[g])
        })
        .collect();

    // Exposed time: compute-stream stalls attributed to the binding dependency.
    let mut comm_iv = Vec::new();
    let mut xfer_iv = Vec::new();
    for &g in &active {
        let mut prev_end = 0.0;
        for t in tasks.iter().filter(|t| t.gpu == Some(g) && t.kind.is_compute()) {
            if t.start > prev_end {
                let binding = t
                    .deps
                    .iter()
                    .map(|&d| (at(d), tasks[d.task()].kind))
                    .filter(|(time, _)| *time >= t.start)
                    .map(|(_, k)| k)
                    .min_by_key(|k| !k.is_collective());
                match binding {
                    Some(k) if k.is_collective() => comm_iv.push((prev_end, t.start)),
                    Some(k) if k.is_transfer() => xfer_iv.push((prev_end, t.start)),
                    _ => {}
                }
            }
            prev_end = t.end;
        }
        if iteration_ms > prev_end {
            comm_iv.push((prev_end, iteration_ms));
        }
    }

    Ok(SimResult {
        iteration_ms,
        per_layer_fwd_ms,
        per_layer_bwd_ms,
        peak_gpu_memory,
        peak_cpu_buffer,
        peak_activation_residency: act_unit,
        peak_buffer_bytes,
        exposed_comm_ms: union_length(comm_iv),
        exposed_transfer_ms: union_length(xfer_iv),
        trace,
        tasks,
    })
}

/// Largest per-unit boundary-activation residency per GPU, in bytes.
pub fn peak_activation_memory(cfg: &SimConfig<'_>) -> Result<Vec<f64>> {
    Ok(simulate_iteration(cfg)?.peak_activation_residency)
}

/// Layer latencies predicted from the performance models for this
/// configuration, with recomputation counted in the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalyticLatency {
    pub layer_fwd_ms: f64,
    pub layer_bwd_ms: f64,
    pub iteration_ms: f64,
}

pub fn analytic_latency(cfg: &SimConfig<'_>) -> AnalyticLatency {
    let (ag, rs) = collective_latency::<f64>(&cfg.cluster.comm, cfg.plan.uneven_sharding_used);
    let mut fwd = ag;
    let mut bwd = ag + rs;
    for (a, p) in cfg.plan.assignments.iter().zip(&cfg.perf.gpus) {
        if a.is_idle() {
            continue;
        }
        let l = a.num_microbatches as f64;
        let f = p.fwd.eval(a.microbatch);
        fwd = fwd.max(l * f);
        bwd = bwd.max(l * (p.bwd.eval(a.microbatch) + cfg.recompute_factor * f));
    }
    AnalyticLatency {
        layer_fwd_ms: fwd,
        layer_bwd_ms: bwd,
        iteration_ms: cfg.model.layers as f64 * (fwd + bwd),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrosscheckReport {
    pub predicted: AnalyticLatency,
    pub simulated_iteration_ms: f64,
    pub simulated_layer_fwd_ms: f64,
    pub simulated_layer_bwd_ms: f64,
    /// `|simulated - predicted| / simulated` for the iteration.
    pub relative_error: f64,
}

pub fn crosscheck_optimizer(plan: &TrainPlan, cfg: &SimConfig<'_>) -> Result<CrosscheckReport> {
    let cfg = SimConfig { plan, ..*cfg };
    let sim = simulate_iteration(&cfg)?;
    let predicted = analytic_latency(&cfg);
    Ok(CrosscheckReport {
        predicted,
        simulated_iteration_ms: sim.iteration_ms,
        simulated_layer_fwd_ms: sim.per_layer_fwd_ms,
        simulated_layer_bwd_ms: sim.per_layer_bwd_ms,
        relative_error: (sim.iteration_ms - predicted.iteration_ms).abs() / sim.iteration_ms,
    })
}
