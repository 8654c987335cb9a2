//! Task-graph event engine.
//!
//! Tasks run on FIFO resources in the order they were added. A task starts
//! once its resource is free and every dependency edge has fired; an edge
//! fires at the start or the end of another task. Because resource order
//! is fixed at construction, finish times are monotone in task durations.

use serde::Serialize;

pub type TaskId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "at", content = "task", rename_all = "snake_case")]
pub enum Edge {
    Start(TaskId),
    End(TaskId),
}

impl Edge {
    pub fn task(&self) -> TaskId {
        match *self {
            Edge::Start(t) | Edge::End(t) => t,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Task<P> {
    pub payload: P,
    pub duration: f64,
    pub resource: usize,
    pub deps: Vec<Edge>,
    /// Previous task on the same resource.
    pub resource_pred: Option<TaskId>,
}

#[derive(Debug, Clone)]
pub struct Engine<P> {
    tasks: Vec<Task<P>>,
    last_on: Vec<Option<TaskId>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl Timing {
    pub fn at(&self, e: Edge) -> f64 {
        match e {
            Edge::Start(t) => self.start[t],
            Edge::End(t) => self.end[t],
        }
    }

    pub fn makespan(&self) -> f64 {
        self.end.iter().copied().fold(0.0, f64::max)
    }
}

impl<P> Engine<P> {
    pub fn new(resources: usize) -> Self {
        Engine {
            tasks: Vec::new(),
            last_on: vec![None; resources],
        }
    }

    /// Adds a task; every dependency must name an earlier task.
    pub fn add(&mut self, payload: P, duration: f64, resource: usize, deps: Vec<Edge>) -> TaskId {
        let id = self.tasks.len();
        assert!(
            deps.iter().all(|d| d.task() < id),
            "dependency on a task that does not exist yet"
        );
        assert!(duration >= 0.0, "negative task duration");
        let resource_pred = self.last_on[resource].replace(id);
        self.tasks.push(Task {
            payload,
            duration,
            resource,
            deps,
            resource_pred,
        });
        id
    }

    pub fn tasks(&self) -> &[Task<P>] {
        &self.tasks
    }

    pub fn into_tasks(self) -> Vec<Task<P>> {
        self.tasks
    }

    /// Earliest start times. Insertion order is a topological order, so one
    /// pass suffices.
    pub fn run(&self) -> Timing {
        let n = self.tasks.len();
        let mut timing = Timing {
            start: vec![0.0; n],
            end: vec![0.0; n],
        };
        for (id, task) in self.tasks.iter().enumerate() {
            let mut s = task.resource_pred.map_or(0.0, |p| timing.end[p]);
            for &d in &task.deps {
                s = s.max(timing.at(d));
            }
            timing.start[id] = s;
            timing.end[id] = s + task.duration;
        }
        timing
    }
}
