mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{plan, setup};
use hetplan::gradcheck::check_random;
use hetplan::model::{load_cluster, load_model, load_profiles, to_json_pretty};
use hetplan::optimizer::greedy_quanta;
use hetplan::perf::{fit_profile, ClusterPerf, FittedModels};
use hetplan::sim::{crosscheck_optimizer, lint_trace, to_jsonl};
use hetplan::synth::{compute_bound_instance, run_oracle};
use hetplan::{
    assign_unit_shards, dp_optimize, simulate_iteration, validate_plan, ClusterSpec, ModelSpec,
    OptimizerOptions, SimConfig, TrainPlan, GIB,
};

const ORACLE_SEED: u64 = 20240501;
const ORACLE_COUNT: usize = 500;
const GRAD_SEED: u64 = 3;
const SIM_SEED: u64 = 6;
const PARTITION_SEED: u64 = 8;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

/// Files written by one run, keyed by name.
#[derive(Default)]
struct Artifacts {
    dir: PathBuf,
    files: BTreeMap<String, Vec<u8>>,
}

impl Artifacts {
    fn new(dir: PathBuf) -> Self {
        std::fs::create_dir_all(&dir).unwrap();
        Artifacts {
            dir,
            files: BTreeMap::new(),
        }
    }

    fn write(&mut self, name: String, content: String) {
        let path = self.dir.join(&name);
        std::fs::write(&path, &content).unwrap();
        self.files.insert(name, std::fs::read(&path).unwrap());
    }

    fn plan(&mut self, name: String, plan: &TrainPlan) {
        self.write(format!("{name}.plan.json"), to_json_pretty(plan));
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

struct Fixture {
    cluster: ClusterSpec,
    model: ModelSpec,
    perf: ClusterPerf<f64>,
}

fn fixture(cluster: &str, profiles: &str, model: &str) -> Fixture {
    let dir = fixtures();
    let cluster = load_cluster(dir.join(cluster)).unwrap();
    let docs = load_profiles(dir.join(profiles)).unwrap();
    let fitted = FittedModels::from_docs(&docs, None).unwrap();
    let perf = ClusterPerf::from_fitted(&cluster, &fitted).unwrap();
    let model = load_model(dir.join(model)).unwrap();
    Fixture {
        cluster,
        model,
        perf,
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

// ---- 1 and 2 ----

fn oracle_equivalence(art: &mut Artifacts, plans: &mut Vec<TrainPlan>) -> Outcome {
    let t = Instant::now();
    let out = run_oracle(ORACLE_SEED, ORACLE_COUNT).unwrap();
    let secs = t.elapsed().as_secs_f64();
    for (i, p) in out.plans.iter().enumerate() {
        art.plan(format!("oracle_{i:03}"), p);
    }
    plans.extend(out.plans.iter().cloned());
    let mut detail = format!(
        "{} instances ({} feasible, {} infeasible) in {secs:.1} s",
        out.instances, out.feasible, out.infeasible
    );
    if let Some(m) = out.mismatches.first() {
        detail.push_str(&format!("; {} mismatches, first: {m}", out.mismatches.len()));
    }
    Outcome::new(out.mismatches.is_empty() && out.infeasible > 0 && secs <= 60.0, detail)
}

fn fixture_plans(art: &mut Artifacts) -> Vec<(String, Fixture, TrainPlan)> {
    let cases = [
        ("cluster_a_b64", "cluster_a.json", "bertlarge_clusterA_profiles.json", "bertlarge_b64.json"),
        ("cluster_a_b256", "cluster_a.json", "bertlarge_clusterA_profiles.json", "bertlarge_b256.json"),
        ("cluster_b_b64", "cluster_b.json", "bertlarge_clusterB_profiles.json", "bertlarge_b64.json"),
    ];
    let opts = OptimizerOptions {
        allow_idle: true,
        ..Default::default()
    };
    let mut out = Vec::new();
    for (name, c, p, m) in cases {
        let fx = fixture(c, p, m);
        let o = dp_optimize(&fx.cluster, &fx.model, &fx.perf, &opts).unwrap();
        art.plan(format!("fixture_{name}"), &o.plan);
        out.push((name.to_string(), fx, o.plan));
    }
    out
}

fn ratio_sum_ok(plan: &TrainPlan) -> bool {
    let sum: f64 = plan.assignments.iter().map(|a| a.state_ratio).sum();
    (sum - 1.0).abs() <= 1e-9
}

fn constraint_suite(
    oracle_plans: &[TrainPlan],
    extra: &[(String, Fixture, TrainPlan)],
) -> Outcome {
    let mut checked = 0;
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(ORACLE_SEED);
    // Regenerate the oracle instances to validate against their inputs.
    let mut idx = 0;
    for _ in 0..ORACLE_COUNT {
        let inst = hetplan::synth::oracle_instance(&mut rng);
        let allow_idle = rng.gen_bool(0.3);
        let opts = OptimizerOptions {
            allow_idle,
            threads: 1,
            ..Default::default()
        };
        let Ok(o) = dp_optimize(&inst.cluster, &inst.model, &inst.perf, &opts) else {
            continue;
        };
        let p = &oracle_plans[idx];
        idx += 1;
        if to_json_pretty(p) != to_json_pretty(&o.plan) {
            failures.push(format!("oracle plan {idx} not reproduced"));
        }
        let v = validate_plan(p, &inst.cluster, &inst.model, &inst.perf);
        if !v.is_empty() || !ratio_sum_ok(p) {
            failures.push(format!("oracle plan {idx}: {v:?}"));
        }
        checked += 1;
    }
    for (name, fx, p) in extra {
        let v = validate_plan(p, &fx.cluster, &fx.model, &fx.perf);
        if !v.is_empty() || !ratio_sum_ok(p) {
            failures.push(format!("{name}: {v:?}"));
        }
        checked += 1;
    }
    let detail = match failures.first() {
        None => format!("{checked} plans, zero violations"),
        Some(f) => format!("{} of {checked} plans failed, first: {f}", failures.len()),
    };
    Outcome::new(failures.is_empty() && idx == oracle_plans.len(), detail)
}

// ---- 3, 4, 5 ----

fn gradient_identity() -> Outcome {
    let s = check_random(GRAD_SEED, 1000, 1e-12);
    Outcome::new(
        s.passed && s.fixtures == 1000,
        format!("{} fixtures, max relative error {:.2e}", s.fixtures, s.max_relative_error),
    )
}

/// Least squares through the normal equations.
fn normal_equations(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (slope, (sy - slope * sx) / n)
}

fn fit_fidelity() -> Outcome {
    let docs = load_profiles(fixtures().join("bertlarge_a6000_profile.json")).unwrap();
    let doc = &docs[0];
    let fitted = fit_profile(doc, None).unwrap();
    let fwd = &fitted.models.fwd;
    let exact = doc.fwd_ms.iter().all(|&(m, v)| fwd.eval(m) == v) && doc.fwd_ms.len() == 16;
    let ratio = fwd.eval(32) / fwd.eval(16);

    let mem = &fitted.models.memory;
    let slope_gib = mem.slope / GIB;
    let intercept_gib = mem.intercept / GIB;
    let two_point = (18.16 - 10.23) / 15.0;
    let slope_dev = rel(slope_gib, two_point);
    let pts: Vec<(f64, f64)> = doc.compute_mem_gib.iter().map(|&(m, g)| (m as f64, g)).collect();
    let (os, oi) = normal_equations(&pts);
    let oracle_ok = rel(slope_gib, os) <= 1e-9
        && rel(intercept_gib, oi) <= 1e-9
        && (slope_gib - 0.529206).abs() <= 1e-5
        && (intercept_gib - 9.68925).abs() <= 1e-4;
    Outcome::new(
        exact && (1.9..=2.1).contains(&ratio) && slope_dev <= 0.02 && oracle_ok,
        format!(
            "table exact {exact}, eval(32)/eval(16) = {ratio:.4}, memory slope {slope_gib:.4} GiB \
             ({:.2}% from two-point), intercept {intercept_gib:.3} GiB",
            100.0 * slope_dev
        ),
    )
}

fn sharding_example() -> Outcome {
    let model = ModelSpec {
        layers: 2,
        params_per_layer: 1_000_000,
        bytes_per_param_state: 16,
        global_batch: 1,
    };
    let p = assign_unit_shards(&[0.75, 0.25], &model).unwrap();
    let f0 = p.fractions(0);
    let f1 = p.fractions(1);
    Outcome::new(
        f0 == [0.5, 0.5] && f1 == [1.0, 0.0] && p.uneven_units == 1,
        format!("units {f0:?} {f1:?}, uneven_units {}", p.uneven_units),
    )
}

// ---- 6 and 7 ----

/// Per-layer forward and backward latency from the performance models, with
/// recomputation at the forward cost.
fn layer_latency(plan: &TrainPlan, cluster: &ClusterSpec, perf: &ClusterPerf<f64>) -> (f64, f64) {
    let factor = if plan.uneven_sharding_used {
        1.0 + cluster.comm.uneven_overhead
    } else {
        1.0
    };
    let ag = cluster.comm.allgather_even * factor;
    let rs = cluster.comm.reducescatter_even * factor;
    let (mut fwd, mut bwd) = (ag, ag + rs);
    for (a, p) in plan.assignments.iter().zip(&perf.gpus) {
        if a.batch == 0 {
            continue;
        }
        let l = a.num_microbatches as f64;
        let f = p.fwd.intercept + p.fwd.slope * a.microbatch as f64;
        let b = p.bwd.intercept + p.bwd.slope * a.microbatch as f64;
        fwd = fwd.max(l * f);
        bwd = bwd.max(l * (b + f));
    }
    (fwd, bwd)
}

fn simulator_agreement(art: &mut Artifacts, threads: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SIM_SEED);
    let opts = OptimizerOptions {
        threads,
        ..Default::default()
    };
    let (mut worst_layer, mut worst_iter) = (0.0f64, 0.0f64);
    let mut failures = Vec::new();
    for i in 0..100 {
        let inst = compute_bound_instance(&mut rng);
        let o = dp_optimize(&inst.cluster, &inst.model, &inst.perf, &opts).unwrap();
        let cfg = SimConfig::new(&o.plan, &inst.cluster, &inst.model, &inst.perf);
        let r = simulate_iteration(&cfg).unwrap();
        let (fwd, bwd) = layer_latency(&o.plan, &inst.cluster, &inst.perf);
        let e = rel(r.per_layer_fwd_ms, fwd).max(rel(r.per_layer_bwd_ms, bwd));
        worst_layer = worst_layer.max(e);
        let cc = crosscheck_optimizer(&o.plan, &cfg).unwrap();
        worst_iter = worst_iter.max(cc.relative_error);
        if e > 1e-9 || cc.relative_error > 0.01 || !lint_trace(&r).is_empty() {
            failures.push(i);
        }
        art.plan(format!("sim_{i:03}"), &o.plan);
        art.write(format!("sim_{i:03}.trace.jsonl"), to_jsonl(&r.trace));
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "100 instances, worst layer error {worst_layer:.2e}, worst iteration crosscheck {:.3}%, failing {failures:?}",
            100.0 * worst_iter
        ),
    )
}

fn offload_property(art: &mut Artifacts) -> Outcome {
    const ACT: f64 = 4e6;
    type Case = (&'static [f64], &'static [f64], f64, &'static [(u32, u32)]);
    let cases: [Case; 5] = [
        (&[1.0], &[0.0], 2.0, &[(2, 8)]),
        (&[3.0], &[0.5], 2.5, &[(4, 4)]),
        (&[2.0, 3.0], &[0.4, 0.2], 2.0, &[(2, 4), (1, 6)]),
        (&[1.5, 2.5, 4.0], &[0.1, 0.3, 0.0], 1.8, &[(1, 4), (2, 5), (3, 4)]),
        (&[1.0, 1.0], &[0.0, 0.0], 3.0, &[(1, 10), (5, 4)]),
    ];
    let mut worst_ratio_margin = f64::INFINITY;
    let mut worst_slowdown = 0.0f64;
    let mut failures = Vec::new();
    for (ci, (fs, fi, ratio, choices)) in cases.iter().enumerate() {
        let batch = choices.iter().map(|c| c.0 * c.1).sum();
        let s = setup(fs, fi, *ratio, &vec![64.0; fs.len()], 0.1, 0.1, 6, batch);
        let p = plan(&s, choices);
        let mut cfg = SimConfig::new(&p, &s.cluster, &s.model, &s.perf);
        cfg.activation_bytes_per_sample = ACT;
        // Bytes per ms the host link must sustain to keep up with compute:
        // two transfers per forward and three per recompute-plus-backward.
        let bandwidth = choices
            .iter()
            .zip(&s.perf.gpus)
            .map(|(&(m, _), g)| {
                let bytes = m as f64 * ACT;
                let f = g.fwd.eval(m);
                let b = g.bwd.eval(m);
                (2.0 * bytes / f).max(3.0 * bytes / (f + b))
            })
            .fold(0.0, f64::max);
        cfg.offload_bandwidth = bandwidth;
        cfg.offload_enabled = false;
        let off = simulate_iteration(&cfg).unwrap();
        cfg.offload_enabled = true;
        let on = simulate_iteration(&cfg).unwrap();
        art.write(format!("offload_{ci}.trace.jsonl"), to_jsonl(&on.trace));
        for (g, &(_, l)) in choices.iter().enumerate() {
            let achieved = off.peak_activation_residency[g] / on.peak_activation_residency[g];
            let margin = achieved / (l as f64 / 2.0);
            worst_ratio_margin = worst_ratio_margin.min(margin);
            if margin < 1.0 {
                failures.push(format!("case {ci} gpu {g}: reduction {achieved:.2} < {}", l as f64 / 2.0));
            }
        }
        let slowdown = (on.iteration_ms - off.iteration_ms) / off.iteration_ms;
        worst_slowdown = worst_slowdown.max(slowdown);
        if slowdown > 0.01 {
            failures.push(format!("case {ci}: slowdown {:.3}%", 100.0 * slowdown));
        }
        if !lint_trace(&on).is_empty() {
            failures.push(format!("case {ci}: trace lint failed"));
        }
    }
    let mut detail = format!(
        "{} plans, worst reduction/(l/2) {worst_ratio_margin:.2}, worst slowdown {:.4}%",
        cases.len(),
        100.0 * worst_slowdown
    );
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; {f}"));
    }
    Outcome::new(failures.is_empty(), detail)
}

// ---- 8 and 9 ----

fn max_util(compute: &[f64], caps: &[f64], state: f64, total: u32, held: &[u32]) -> f64 {
    (0..held.len())
        .map(|i| (compute[i] + state * held[i] as f64 / total as f64) / caps[i])
        .fold(0.0, f64::max)
}

/// Smallest max-utilization over every feasible quanta assignment.
fn exhaustive(compute: &[f64], caps: &[f64], state: f64, total: u32) -> Option<f64> {
    fn rec(
        i: usize,
        left: u32,
        held: &mut Vec<u32>,
        args: (&[f64], &[f64], f64, u32),
        best: &mut Option<f64>,
    ) {
        let (compute, caps, state, total) = args;
        if i == compute.len() {
            if left == 0 {
                let u = max_util(compute, caps, state, total, held);
                if best.is_none_or(|b| u < b) {
                    *best = Some(u);
                }
            }
            return;
        }
        for q in 0..=left {
            if compute[i] + state * q as f64 / total as f64 > caps[i] {
                break;
            }
            held.push(q);
            rec(i + 1, left - q, held, args, best);
            held.pop();
        }
    }
    let mut best = None;
    rec(0, total, &mut Vec::new(), (compute, caps, state, total), &mut best);
    best
}

fn greedy_partition() -> Outcome {
    let quanta = 1024;
    let held = greedy_quanta(&[6.0 * GIB, 6.0 * GIB], &[24.0 * GIB, 12.0 * GIB], 12.0 * GIB, quanta).unwrap();
    let p40 = 12.0 * held[0] as f64 / quanta as f64;
    let worked = (p40 - 10.0).abs() <= 12.0 / quanta as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(PARTITION_SEED);
    let (mut instances, mut infeasible, mut failures) = (0, 0, Vec::new());
    for i in 0..400 {
        let n = rng.gen_range(1..=4usize);
        let total = rng.gen_range(1..=12u32);
        let compute: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..4.0)).collect();
        let caps: Vec<f64> = compute.iter().map(|c| c + rng.gen_range(0.5..8.0)).collect();
        let room: f64 = caps.iter().zip(&compute).map(|(a, c)| a - c).sum();
        let state = rng.gen_range(0.1..1.2) * room;
        instances += 1;
        let greedy = greedy_quanta(&compute, &caps, state, total);
        match (greedy, exhaustive(&compute, &caps, state, total)) {
            (Some(h), Some(opt)) => {
                let g = max_util(&compute, &caps, state, total, &h);
                let step = caps.iter().map(|c| state / total as f64 / c).fold(0.0, f64::max);
                if g > opt + step + 1e-12 {
                    failures.push(format!("instance {i}: greedy {g} vs optimal {opt}"));
                }
            }
            (None, None) => infeasible += 1,
            (g, o) => failures.push(format!("instance {i}: greedy {g:?} vs optimal {o:?}")),
        }
    }
    let mut detail = format!(
        "P40 holds {p40:.4} GB (target 10); {instances} exhaustive instances ({infeasible} infeasible)"
    );
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; {} failures, first: {f}", failures.len()));
    }
    Outcome::new(worked && failures.is_empty(), detail)
}

fn scale_budget(art: &mut Artifacts, threads: usize) -> (Outcome, (String, Fixture, TrainPlan)) {
    let fx = fixture("cluster_b.json", "bertlarge_clusterB_profiles.json", "bertlarge_b512.json");
    let opts = OptimizerOptions {
        threads,
        ..Default::default()
    };
    let t = Instant::now();
    let o = dp_optimize(&fx.cluster, &fx.model, &fx.perf, &opts).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let r = &o.report;
    art.plan("scale_b512".into(), &o.plan);
    let outcome = Outcome::new(
        fx.cluster.len() == 64 && fx.model.global_batch == 512 && secs <= 600.0 && r.transitions > 0,
        format!(
            "N=64 B=512 in {secs:.1} s on {} threads; transitions {}, pruned memory {}, pruned dominance {}, reachable states {}",
            r.threads, r.transitions, r.pruned_memory, r.pruned_dominance, r.reachable_states
        ),
    );
    (outcome, ("cluster_b_b512".into(), fx, o.plan))
}

// ---- driver ----

fn run_all(dir: PathBuf, threads: usize) -> (Vec<Outcome>, Artifacts) {
    let mut art = Artifacts::new(dir);
    let mut oracle_plans = Vec::new();
    let c1 = oracle_equivalence(&mut art, &mut oracle_plans);
    let (c9, scale_plan) = scale_budget(&mut art, threads);
    let mut extra = fixture_plans(&mut art);
    extra.push(scale_plan);
    let c2 = constraint_suite(&oracle_plans, &extra);
    let c3 = gradient_identity();
    let c4 = fit_fidelity();
    let c5 = sharding_example();
    let c6 = simulator_agreement(&mut art, threads);
    let c7 = offload_property(&mut art);
    let c8 = greedy_partition();
    (vec![c1, c2, c3, c4, c5, c6, c7, c8, c9], art)
}

fn main() -> ExitCode {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let (mut outcomes, first) = run_all(root.join("run1"), 0);
    let (_, second) = run_all(root.join("run2"), 2);
    let differing: Vec<&String> = first
        .files
        .keys()
        .chain(second.files.keys())
        .filter(|k| first.files.get(*k) != second.files.get(*k))
        .collect();
    outcomes.push(Outcome::new(
        differing.is_empty() && !first.files.is_empty(),
        format!(
            "{} plan and trace files byte-identical across reruns (second run on 2 threads){}",
            first.files.len(),
            differing.first().map(|d| format!("; differs: {d}")).unwrap_or_default()
        ),
    ));

    let names = [
        "oracle equivalence",
        "constraint suite",
        "gradient identity",
        "profile fit fidelity",
        "unit sharding example",
        "simulator-analytic agreement",
        "offloading property",
        "greedy partition",
        "scale budget",
        "determinism",
    ];
    let mut failed = 0;
    for (i, (name, o)) in names.iter().zip(&outcomes).enumerate() {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {:>2}. {name}: {}", i + 1, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
