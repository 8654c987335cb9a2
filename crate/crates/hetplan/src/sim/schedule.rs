//! Builds the task graph for one iteration of layered gradient accumulation.
//!
//! Forward: every GPU runs all of its microbatches through unit `u` before
//! moving to `u + 1`; `AG_{u+1}` is issued when unit `u` starts. Backward
//! mirrors it with recomputation before each microbatch's backward,
//! `AG_{u-1}` issued when unit `u` starts and `RS_u` after its last
//! microbatch. Collectives share one network queue in program order and
//! complete for all GPUs at once.
//!
//! With offload on and more than one microbatch, boundary activations and
//! activation gradients leave the GPU right after they are produced and are
//! prefetched one step before use on a separate transfer stream.

use super::engine::{Edge, Engine, TaskId};
use super::trace::EventKind;

#[derive(Debug, Clone, Copy)]
pub(crate) struct GpuWork {
    pub count: u32,
    pub fwd_ms: f64,
    pub bwd_ms: f64,
    pub recompute_ms: f64,
    pub offload: bool,
    /// Bytes of one microbatch's boundary activation.
    pub buffer_bytes: f64,
    /// Transfer time for one such buffer.
    pub transfer_ms: f64,
}

impl GpuWork {
    pub fn is_active(&self) -> bool {
        self.count > 0
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Payload {
    pub kind: EventKind,
    pub gpu: Option<usize>,
    pub unit: u32,
    pub micro: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BufKind {
    Act,
    Grad,
}

/// Lifetime of one buffer copy on the GPU or in host memory.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BufferSpan {
    pub gpu: usize,
    pub kind: BufKind,
    /// Unit that consumes the buffer.
    pub consumer: u32,
    pub bytes: f64,
    pub on_cpu: bool,
    pub alloc: Edge,
    pub free: Edge,
}

pub(crate) struct Schedule {
    pub engine: Engine<Payload>,
    pub spans: Vec<BufferSpan>,
    /// Forward and backward compute tasks per GPU: `[u * l + j]`.
    pub fwd: Vec<Vec<TaskId>>,
    pub bwd: Vec<Vec<TaskId>>,
}

struct Slots {
    l: usize,
    v: Vec<Option<TaskId>>,
}

impl Slots {
    fn new(units: usize, l: usize) -> Self {
        Slots {
            l,
            v: vec![None; units * l],
        }
    }
    fn set(&mut self, u: usize, j: usize, t: TaskId) {
        self.v[u * self.l + j] = Some(t);
    }
    fn get(&self, u: usize, j: usize) -> TaskId {
        self.v[u * self.l + j].expect("schedule slot filled before use")
    }
}

struct GpuState {
    f: Slots,
    ra: Slots,
    b: Slots,
    cg_fwd: Slots,
    gc_act: Slots,
    cg_back: Slots,
    gc_grad: Slots,
    cg_grad: Slots,
}

pub(crate) fn build(work: &[GpuWork], layers: u32, ag: &[f64], rs: &[f64]) -> Schedule {
    let n = work.len();
    let units = layers as usize;
    let net = 2 * n;
    let mut eng = Engine::new(2 * n + 1);
    let mut spans = Vec::new();
    let mut st: Vec<GpuState> = work
        .iter()
        .map(|w| {
            let l = w.count as usize;
            GpuState {
                f: Slots::new(units, l),
                ra: Slots::new(units, l),
                b: Slots::new(units, l),
                cg_fwd: Slots::new(units, l),
                gc_act: Slots::new(units, l),
                cg_back: Slots::new(units, l),
                gc_grad: Slots::new(units, l),
                cg_grad: Slots::new(units, l),
            }
        })
        .collect();
    let active: Vec<usize> = (0..n).filter(|&g| work[g].is_active()).collect();
    let on_gpu = |g: usize| Some(g);
    let pay = |kind, gpu, unit: usize, micro: usize| Payload {
        kind,
        gpu,
        unit: unit as u32,
        micro: micro as u32,
    };
    let collective = |kind, unit: usize| Payload {
        kind,
        gpu: None,
        unit: unit as u32,
        micro: 0,
    };

    // ---- forward ----
    let mut ag_f = vec![None; units];
    ag_f[0] = Some(eng.add(collective(EventKind::Allgather, 0), ag[0], net, vec![]));
    for u in 0..units {
        for &g in &active {
            let w = work[g];
            let (l, off, x) = (w.count as usize, w.offload, w.transfer_ms);
            let (comp, xfer) = (2 * g, 2 * g + 1);
            let s = &mut st[g];
            for j in 0..l {
                let mut deps = Vec::new();
                if j == 0 {
                    deps.push(Edge::End(ag_f[u].expect("allgather issued")));
                }
                if off && u >= 1 {
                    deps.push(Edge::End(s.cg_fwd.get(u, j)));
                }
                let f = eng.add(pay(EventKind::FwdCompute, on_gpu(g), u, j + 1), w.fwd_ms, comp, deps);
                s.f.set(u, j, f);
                if off {
                    if j + 1 < l {
                        if u >= 1 {
                            let gc = s.gc_act.get(u, j + 1);
                            let t = eng.add(
                                pay(EventKind::PrefetchAct, on_gpu(g), u, j + 2),
                                x,
                                xfer,
                                vec![Edge::Start(f), Edge::End(gc)],
                            );
                            s.cg_fwd.set(u, j + 1, t);
                        }
                    } else if u + 1 < units {
                        let gc = s.gc_act.get(u + 1, 0);
                        let t = eng.add(
                            pay(EventKind::PrefetchAct, on_gpu(g), u + 1, 1),
                            x,
                            xfer,
                            vec![Edge::Start(f), Edge::End(gc)],
                        );
                        s.cg_fwd.set(u + 1, 0, t);
                    } else if u >= 1 {
                        let gc = s.gc_act.get(u, 0);
                        let t = eng.add(
                            pay(EventKind::PrefetchAct, on_gpu(g), u, 1),
                            x,
                            xfer,
                            vec![Edge::Start(f), Edge::End(gc)],
                        );
                        s.cg_back.set(u, 0, t);
                    }
                    if u + 1 < units {
                        let t = eng.add(
                            pay(EventKind::OffloadAct, on_gpu(g), u + 1, j + 1),
                            x,
                            xfer,
                            vec![Edge::End(f)],
                        );
                        s.gc_act.set(u + 1, j, t);
                    }
                }
            }
        }
        if u + 1 < units {
            let deps = active.iter().map(|&g| Edge::Start(st[g].f.get(u, 0))).collect();
            ag_f[u + 1] = Some(eng.add(collective(EventKind::Allgather, u + 1), ag[u + 1], net, deps));
        }
    }

    // ---- backward ----
    let mut ag_b = vec![None; units];
    for u in (0..units).rev() {
        for &g in &active {
            let w = work[g];
            let (l, off, x) = (w.count as usize, w.offload, w.transfer_ms);
            let (comp, xfer) = (2 * g, 2 * g + 1);
            let s = &mut st[g];
            for j in 0..l {
                let mut deps = Vec::new();
                if j == 0 && u + 1 < units {
                    deps.push(Edge::End(ag_b[u].expect("allgather issued")));
                }
                if off && u >= 1 {
                    deps.push(Edge::End(s.cg_back.get(u, j)));
                }
                let ra = eng.add(pay(EventKind::Recompute, on_gpu(g), u, j + 1), w.recompute_ms, comp, deps);
                s.ra.set(u, j, ra);
                if off {
                    if j + 1 < l {
                        if u >= 1 {
                            let gc = s.gc_act.get(u, j + 1);
                            let t = eng.add(
                                pay(EventKind::PrefetchAct, on_gpu(g), u, j + 2),
                                x,
                                xfer,
                                vec![Edge::Start(ra), Edge::End(gc)],
                            );
                            s.cg_back.set(u, j + 1, t);
                        }
                    } else if u >= 2 {
                        let gc = s.gc_act.get(u - 1, 0);
                        let t = eng.add(
                            pay(EventKind::PrefetchAct, on_gpu(g), u - 1, 1),
                            x,
                            xfer,
                            vec![Edge::Start(ra), Edge::End(gc)],
                        );
                        s.cg_back.set(u - 1, 0, t);
                    }
                }

                let mut deps = Vec::new();
                if off && u + 1 < units {
                    deps.push(Edge::End(s.cg_grad.get(u + 1, j)));
                }
                let b = eng.add(pay(EventKind::BwdCompute, on_gpu(g), u, j + 1), w.bwd_ms, comp, deps);
                s.b.set(u, j, b);
                if off {
                    if j + 1 < l {
                        if u + 1 < units {
                            let gc = s.gc_grad.get(u + 1, j + 1);
                            let t = eng.add(
                                pay(EventKind::PrefetchGrad, on_gpu(g), u + 1, j + 2),
                                x,
                                xfer,
                                vec![Edge::Start(b), Edge::End(gc)],
                            );
                            s.cg_grad.set(u + 1, j + 1, t);
                        }
                    } else if u >= 1 {
                        let gc = s.gc_grad.get(u, 0);
                        let t = eng.add(
                            pay(EventKind::PrefetchGrad, on_gpu(g), u, 1),
                            x,
                            xfer,
                            vec![Edge::Start(b), Edge::End(gc)],
                        );
                        s.cg_grad.set(u, 0, t);
                    }
                    if u >= 1 {
                        let t = eng.add(
                            pay(EventKind::OffloadGrad, on_gpu(g), u, j + 1),
                            x,
                            xfer,
                            vec![Edge::End(b)],
                        );
                        s.gc_grad.set(u, j, t);
                    }
                }
            }
        }
        if u >= 1 {
            let deps = active.iter().map(|&g| Edge::Start(st[g].ra.get(u, 0))).collect();
            ag_b[u - 1] = Some(eng.add(collective(EventKind::Allgather, u - 1), ag[u - 1], net, deps));
        }
        let deps = active
            .iter()
            .map(|&g| Edge::End(st[g].b.get(u, work[g].count as usize - 1)))
            .collect();
        eng.add(collective(EventKind::Reducescatter, u), rs[u], net, deps);
    }

    // ---- buffer lifetimes ----
    for &g in &active {
        let w = work[g];
        let s = &st[g];
        let bytes = w.buffer_bytes;
        let span = |kind, consumer: usize, on_cpu, alloc, free| BufferSpan {
            gpu: g,
            kind,
            consumer: consumer as u32,
            bytes,
            on_cpu,
            alloc,
            free,
        };
        for u in 1..units {
            for j in 0..w.count as usize {
                let produced = Edge::End(s.f.get(u - 1, j));
                let grad_made = Edge::End(s.b.get(u, j));
                let grad_used = Edge::End(s.b.get(u - 1, j));
                if w.offload {
                    let gc = s.gc_act.get(u, j);
                    let cgb = s.cg_back.get(u, j);
                    spans.push(span(BufKind::Act, u, false, produced, Edge::End(gc)));
                    spans.push(span(BufKind::Act, u, true, Edge::Start(gc), Edge::End(cgb)));
                    let cgf = s.cg_fwd.get(u, j);
                    spans.push(span(BufKind::Act, u, false, Edge::Start(cgf), Edge::End(s.f.get(u, j))));
                    spans.push(span(BufKind::Act, u, false, Edge::Start(cgb), Edge::End(s.ra.get(u, j))));
                    let gcg = s.gc_grad.get(u, j);
                    let cgg = s.cg_grad.get(u, j);
                    spans.push(span(BufKind::Grad, u - 1, false, grad_made, Edge::End(gcg)));
                    spans.push(span(BufKind::Grad, u - 1, true, Edge::Start(gcg), Edge::End(cgg)));
                    spans.push(span(BufKind::Grad, u - 1, false, Edge::Start(cgg), grad_used));
                } else {
                    spans.push(span(BufKind::Act, u, false, produced, Edge::End(s.ra.get(u, j))));
                    spans.push(span(BufKind::Grad, u - 1, false, grad_made, grad_used));
                }
            }
        }
    }

    let fwd = st.iter().map(|s| s.f.v.iter().flatten().copied().collect()).collect();
    let bwd = st.iter().map(|s| s.b.v.iter().flatten().copied().collect()).collect();
    Schedule {
        engine: eng,
        spans,
        fwd,
        bwd,
    }
}
