//! Trace events, export formats and the causality linter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::engine::Edge;
use super::SimResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    FwdCompute,
    BwdCompute,
    Recompute,
    Allgather,
    Reducescatter,
    OffloadAct,
    PrefetchAct,
    OffloadGrad,
    PrefetchGrad,
}

impl EventKind {
    pub fn is_compute(self) -> bool {
        matches!(
            self,
            EventKind::FwdCompute | EventKind::BwdCompute | EventKind::Recompute
        )
    }

    pub fn is_collective(self) -> bool {
        matches!(self, EventKind::Allgather | EventKind::Reducescatter)
    }

    pub fn is_transfer(self) -> bool {
        !self.is_compute() && !self.is_collective()
    }

    pub fn short(self) -> &'static str {
        match self {
            EventKind::FwdCompute => "F",
            EventKind::BwdCompute => "B",
            EventKind::Recompute => "RA",
            EventKind::Allgather => "AG",
            EventKind::Reducescatter => "RS",
            EventKind::OffloadAct => "GCa",
            EventKind::PrefetchAct => "CGa",
            EventKind::OffloadGrad => "GCg",
            EventKind::PrefetchGrad => "CGg",
        }
    }

    fn lane(self) -> u32 {
        if self.is_compute() {
            0
        } else if self.is_transfer() {
            1
        } else {
            2
        }
    }
}

/// One timeline entry. Collectives appear once per GPU with identical times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Engine task this event belongs to.
    pub task: usize,
    pub gpu_id: String,
    pub kind: EventKind,
    pub unit: u32,
    /// 1-based microbatch index; 0 for collectives.
    pub microbatch: u32,
    pub start: f64,
    pub end: f64,
}

/// One engine task with its resolved times, kept for linting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskRecord {
    pub kind: EventKind,
    /// Owning GPU index; `None` for collectives.
    pub gpu: Option<usize>,
    pub unit: u32,
    pub microbatch: u32,
    pub resource: usize,
    pub start: f64,
    pub end: f64,
    pub deps: Vec<Edge>,
}

pub fn to_jsonl(events: &[Event]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    out
}

/// Chrome trace-event JSON: one process per GPU, lanes for compute, transfer
/// and collectives. Times are in microseconds.
pub fn to_chrome_trace(events: &[Event], gpu_ids: &[String]) -> String {
    let mut list = Vec::with_capacity(events.len() + 4 * gpu_ids.len());
    for (pid, id) in gpu_ids.iter().enumerate() {
        list.push(json!({"name": "process_name", "ph": "M", "pid": pid, "args": {"name": id}}));
        for (tid, lane) in ["compute", "transfer", "collective"].iter().enumerate() {
            list.push(json!({"name": "thread_name", "ph": "M", "pid": pid, "tid": tid, "args": {"name": lane}}));
        }
    }
    for e in events {
        let pid = gpu_ids.iter().position(|g| *g == e.gpu_id).unwrap_or(0);
        let name = if e.microbatch == 0 {
            format!("{}{}", e.kind.short(), e.unit)
        } else {
            format!("{}{},{}", e.kind.short(), e.unit, e.microbatch)
        };
        list.push(json!({
            "name": name,
            "cat": e.kind,
            "ph": "X",
            "pid": pid,
            "tid": e.kind.lane(),
            "ts": e.start * 1e3,
            "dur": (e.end - e.start) * 1e3,
            "args": {"unit": e.unit, "microbatch": e.microbatch},
        }));
    }
    let doc = json!({"traceEvents": list, "displayTimeUnit": "ms"});
    let mut s = serde_json::to_string_pretty(&doc).expect("trace serializes");
    s.push('\n');
    s
}

/// Checks causality, per-resource serialization, collective barriers and
/// compute-stream ordering. Returns one message per problem.
pub fn lint_trace(result: &SimResult) -> Vec<String> {
    let tasks = &result.tasks;
    let mut problems = Vec::new();
    let mut last_on: Vec<Option<usize>> = Vec::new();
    for (id, t) in tasks.iter().enumerate() {
        if !(t.start.is_finite() && t.end >= t.start) {
            problems.push(format!("task {id}: bad interval {}..{}", t.start, t.end));
        }
        for &d in &t.deps {
            let at = match d {
                Edge::Start(p) => tasks[p].start,
                Edge::End(p) => tasks[p].end,
            };
            if t.start < at {
                problems.push(format!("task {id} starts at {} before dependency {d:?} at {at}", t.start));
            }
        }
        if last_on.len() <= t.resource {
            last_on.resize(t.resource + 1, None);
        }
        if let Some(p) = last_on[t.resource] {
            if t.start < tasks[p].end {
                problems.push(format!(
                    "task {id} overlaps task {p} on resource {}",
                    t.resource
                ));
            }
        }
        last_on[t.resource] = Some(id);
    }

    let mut by_task: BTreeMap<usize, f64> = Default::default();
    for e in result.trace.iter().filter(|e| e.kind.is_collective()) {
        let end = *by_task.entry(e.task).or_insert(e.end);
        if end != e.end {
            problems.push(format!(
                "{:?} unit {} ends at {} on {} but {} elsewhere",
                e.kind, e.unit, e.end, e.gpu_id, end
            ));
        }
    }

    let mut per_gpu: BTreeMap<&str, Vec<&Event>> = Default::default();
    for e in result.trace.iter().filter(|e| e.kind.is_compute()) {
        per_gpu.entry(&e.gpu_id).or_default().push(e);
    }
    for (gpu, mut evs) in per_gpu {
        evs.sort_by(|a, b| a.start.total_cmp(&b.start));
        for w in evs.windows(2) {
            if w[1].start < w[0].end {
                problems.push(format!("compute events overlap on GPU {gpu}"));
            }
        }
    }
    problems
}
