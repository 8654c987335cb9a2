use std::path::{Path, PathBuf};

use hetplan::gradcheck::{check_random, global_mean, relative_error, weighted_combine, GradFixture};
use hetplan::model::{parse_cluster, parse_json, parse_model, parse_profiles, to_json_pretty};
use hetplan::perf::{ClusterPerf, FittedModels};
use hetplan::sim::{crosscheck_optimizer, to_chrome_trace, to_jsonl};
use hetplan::synth::run_oracle;
use hetplan::{
    complexity_budget, dp_optimize, simulate_iteration, validate_plan, ClusterSpec, Error,
    ModelSpec, OptimizerOptions, Result, SimConfig, TrainPlan, GIB,
};

use crate::report::Ctx;

/// Rough DP throughput used to turn the transition estimate into seconds.
const TRANSITIONS_PER_SECOND: f64 = 1.0e8;
const GRAD_TOLERANCE: f64 = 1e-12;

pub struct Inputs {
    pub cluster: ClusterSpec,
    pub model: ModelSpec,
    pub perf: ClusterPerf<f64>,
}

pub fn load_inputs(ctx: &mut Ctx, cluster: &Path, model: &Path, perf: &Path) -> Result<Inputs> {
    let cluster = parse_cluster(&ctx.read(cluster)?)?;
    let model = parse_model(&ctx.read(model)?)?;
    let fitted: FittedModels = parse_json(&ctx.read(perf)?)?;
    let perf = ClusterPerf::from_fitted(&cluster, &fitted)?;
    Ok(Inputs {
        cluster,
        model,
        perf,
    })
}

fn load_plan(ctx: &mut Ctx, path: &Path) -> Result<TrainPlan> {
    parse_json(&ctx.read(path)?)
}

pub fn fit(ctx: &mut Ctx, profiles: &[PathBuf], out: &Path, linear_start: Option<u32>) -> Result<i32> {
    let mut docs = Vec::new();
    for p in profiles {
        let parsed = parse_profiles(&ctx.read(p)?)?;
        if parsed.is_empty() {
            return Err(Error::Validation(format!("{}: no profiles", p.display())));
        }
        docs.extend(parsed);
    }
    let fitted = FittedModels::from_docs(&docs, linear_start)?;
    for w in fitted.warnings() {
        ctx.warn(w);
    }
    println!("{:<12} {:>6} {:>10} {:>10} {:>10} {:>12}", "profile", "curve", "slope", "intercept", "residual", "continuity");
    for p in &fitted.profiles {
        for (name, d) in [("fwd", &p.diagnostics.fwd), ("bwd", &p.diagnostics.bwd), ("memory", &p.diagnostics.memory)] {
            let (slope, intercept) = if name == "memory" {
                (d.slope / GIB, d.intercept / GIB)
            } else {
                (d.slope, d.intercept)
            };
            println!(
                "{:<12} {:>6} {:>10.4} {:>10.4} {:>9.2}% {:>11.2}%",
                p.profile_key,
                name,
                slope,
                intercept,
                100.0 * d.max_residual_rel,
                100.0 * d.continuity_gap_rel
            );
        }
    }
    ctx.write(out, &to_json_pretty(&fitted))?;
    ctx.detail("profiles", fitted.profiles.iter().map(|p| &p.profile_key).collect::<Vec<_>>());
    Ok(0)
}

pub struct PlanArgs<'a> {
    pub batch: Option<u32>,
    pub allow_idle: bool,
    pub time_budget: Option<f64>,
    pub threads: usize,
    pub out: &'a Path,
    pub emit_csv: Option<&'a Path>,
}

fn options(allow_idle: bool, threads: usize) -> OptimizerOptions {
    OptimizerOptions {
        allow_idle,
        threads,
        ..Default::default()
    }
}

pub fn plan(ctx: &mut Ctx, mut inp: Inputs, args: PlanArgs<'_>) -> Result<i32> {
    if let Some(b) = args.batch {
        inp.model = inp.model.with_batch(b);
    }
    let (n, b) = (inp.cluster.len(), inp.model.global_batch);
    let estimate = complexity_budget(n, b);
    ctx.detail("estimated_transitions", estimate as f64);
    if let Some(budget) = args.time_budget {
        let secs = estimate as f64 / TRANSITIONS_PER_SECOND;
        if secs > budget {
            ctx.warn(format!(
                "about {estimate:.3e} DP transitions before pruning (~{secs:.0} s), above the {budget} s budget",
                estimate = estimate as f64
            ));
        }
    }
    let opts = options(args.allow_idle, args.threads);
    let result = dp_optimize(&inp.cluster, &inp.model, &inp.perf, &opts)?;
    if !result.report.partition_matches_dp_assumption {
        ctx.warn("final state partition evenness differs from the optimizer's assumption");
    }
    ctx.write(args.out, &to_json_pretty(&result.plan))?;
    ctx.detail("optimizer", &result.report);
    ctx.detail("predicted_iteration_ms", result.plan.predicted_iteration_ms);
    println!("{}", to_json_pretty(&result.report));
    if let Some(dir) = args.emit_csv {
        ctx.write(&dir.join("latency_vs_microbatch.csv"), &latency_csv(&inp))?;
        ctx.write(&dir.join("throughput_vs_batch.csv"), &throughput_csv(&inp, &opts))?;
    }
    Ok(0)
}

fn csv_text<R: IntoIterator<Item = Vec<String>>>(header: &[&str], rows: R) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn latency_csv(inp: &Inputs) -> String {
    let mut rows = Vec::new();
    let mut seen = Vec::new();
    for (g, p) in inp.cluster.gpus.iter().zip(&inp.perf.gpus) {
        if seen.contains(&&g.profile_key) {
            continue;
        }
        seen.push(&g.profile_key);
        let profiled = p.fwd.max_profiled();
        for m in 1..=(2 * profiled).max(16) {
            let regime = if m <= profiled { "table" } else { "linear" };
            rows.push(vec![
                g.profile_key.clone(),
                m.to_string(),
                p.fwd.eval(m).to_string(),
                p.bwd.eval(m).to_string(),
                (p.memory.eval(m) / GIB).to_string(),
                regime.to_string(),
            ]);
        }
    }
    csv_text(&["profile_key", "microbatch", "fwd_ms", "bwd_ms", "compute_mem_gib", "regime"], rows)
}

/// Optimizes powers of two from the GPU count up to the model batch.
fn throughput_csv(inp: &Inputs, opts: &OptimizerOptions) -> String {
    let target = inp.model.global_batch;
    let mut batches = Vec::new();
    let mut b = (inp.cluster.len() as u32).next_power_of_two();
    while b < target {
        batches.push(b);
        b *= 2;
    }
    batches.push(target);
    let rows = batches.into_iter().map(|b| {
        let model = inp.model.with_batch(b);
        match dp_optimize(&inp.cluster, &model, &inp.perf, opts) {
            Ok(o) => {
                let it = o.plan.predicted_iteration_ms;
                vec![b.to_string(), it.to_string(), (b as f64 / (it / 1e3)).to_string()]
            }
            Err(_) => vec![b.to_string(), String::new(), String::new()],
        }
    });
    csv_text(&["global_batch", "iteration_ms", "samples_per_s"], rows)
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TraceFormat {
    Jsonl,
    Chrome,
}

pub struct SimArgs<'a> {
    pub offload: bool,
    /// GB/s; `None` is unlimited.
    pub bandwidth_gbs: Option<f64>,
    pub activation_mib: Option<f64>,
    pub recompute_factor: Option<f64>,
    pub trace_out: Option<&'a Path>,
    pub trace_format: TraceFormat,
    pub emit_csv: Option<&'a Path>,
}

pub fn simulate(ctx: &mut Ctx, plan_path: &Path, inp: Inputs, args: SimArgs<'_>) -> Result<i32> {
    let plan = load_plan(ctx, plan_path)?;
    let mut cfg = SimConfig::new(&plan, &inp.cluster, &inp.model, &inp.perf);
    cfg.offload_enabled = args.offload;
    if let Some(bw) = args.bandwidth_gbs {
        // 1 GB/s is 1e6 bytes per millisecond.
        cfg.offload_bandwidth = bw * 1e6;
    }
    if let Some(a) = args.activation_mib {
        cfg.activation_bytes_per_sample = a * 1024.0 * 1024.0;
    }
    if let Some(r) = args.recompute_factor {
        cfg.recompute_factor = r;
    }
    let result = simulate_iteration(&cfg)?;
    let cc = crosscheck_optimizer(&plan, &cfg)?;
    let summary = result.summary();
    let ids: Vec<String> = inp.cluster.gpus.iter().map(|g| g.id.clone()).collect();
    println!("iteration_ms        {:.4}", summary.iteration_ms);
    println!("layer fwd / bwd ms  {:.4} / {:.4}", summary.per_layer_fwd_ms, summary.per_layer_bwd_ms);
    println!("exposed comm ms     {:.4}", summary.exposed_comm_ms);
    println!("exposed transfer ms {:.4}", summary.exposed_transfer_ms);
    println!("crosscheck error    {:.3}%", 100.0 * cc.relative_error);
    println!("{:<12} {:>14} {:>16} {:>14}", "gpu", "peak_mem_gib", "peak_act_mib", "cpu_buf_mib");
    for (i, id) in ids.iter().enumerate() {
        println!(
            "{:<12} {:>14.3} {:>16.3} {:>14.3}",
            id,
            summary.peak_gpu_memory[i] / GIB,
            summary.peak_activation_residency[i] / (1024.0 * 1024.0),
            summary.peak_cpu_buffer[i] / (1024.0 * 1024.0)
        );
    }
    if cc.relative_error > 0.01 {
        ctx.warn(format!("simulated iteration differs from prediction by {:.2}%", 100.0 * cc.relative_error));
    }
    ctx.detail("summary", &summary);
    ctx.detail("crosscheck", cc);
    if let Some(path) = args.trace_out {
        let text = match args.trace_format {
            TraceFormat::Jsonl => to_jsonl(&result.trace),
            TraceFormat::Chrome => to_chrome_trace(&result.trace, &ids),
        };
        ctx.write(path, &text)?;
    }
    if let Some(dir) = args.emit_csv {
        let compute = result.compute_time(&ids);
        let rows = plan.assignments.iter().enumerate().map(|(i, a)| {
            vec![
                a.gpu_id.clone(),
                a.batch.to_string(),
                a.microbatch.to_string(),
                a.num_microbatches.to_string(),
                compute[i].to_string(),
                summary.peak_gpu_memory[i].to_string(),
                summary.peak_activation_residency[i].to_string(),
                summary.peak_cpu_buffer[i].to_string(),
            ]
        });
        let header = [
            "gpu_id",
            "batch",
            "microbatch",
            "num_microbatches",
            "compute_ms",
            "peak_gpu_memory_bytes",
            "peak_activation_bytes",
            "peak_cpu_buffer_bytes",
        ];
        ctx.write(&dir.join("per_gpu.csv"), &csv_text(&header, rows))?;
    }
    Ok(0)
}

pub fn check_plan(ctx: &mut Ctx, plan_path: &Path, inp: Inputs) -> Result<i32> {
    let plan = load_plan(ctx, plan_path)?;
    let violations = validate_plan(&plan, &inp.cluster, &inp.model, &inp.perf);
    for v in &violations {
        println!("{v}");
    }
    ctx.detail(
        "violations",
        violations.iter().map(ToString::to_string).collect::<Vec<_>>(),
    );
    if violations.is_empty() {
        println!("plan ok");
        Ok(0)
    } else {
        Ok(1)
    }
}

pub fn check_grad(ctx: &mut Ctx, fixture: Option<&Path>, seed: u64, count: usize) -> Result<i32> {
    let (n, err) = match fixture {
        Some(path) => {
            let fx: GradFixture<f64> = parse_json(&ctx.read(path)?)?;
            let a = weighted_combine(&fx)?;
            let b = global_mean(&fx)?;
            (1, relative_error(&a, &b))
        }
        None => {
            ctx.seed = Some(seed);
            let s = check_random(seed, count, GRAD_TOLERANCE);
            (s.fixtures, s.max_relative_error)
        }
    };
    let passed = err <= GRAD_TOLERANCE;
    println!(
        "{} fixtures, max relative error {err:.3e}: {}",
        n,
        if passed { "pass" } else { "FAIL" }
    );
    ctx.detail("fixtures", n);
    ctx.detail("max_relative_error", err);
    Ok(if passed { 0 } else { 1 })
}

pub fn check_oracle(ctx: &mut Ctx, seed: u64, instances: usize) -> Result<i32> {
    ctx.seed = Some(seed);
    let out = run_oracle(seed, instances)?;
    for m in out.mismatches.iter().chain(&out.violations) {
        println!("{m}");
    }
    println!(
        "{} instances ({} feasible, {} infeasible): {}",
        out.instances,
        out.feasible,
        out.infeasible,
        if out.passed() { "pass" } else { "FAIL" }
    );
    ctx.detail("oracle", &out);
    Ok(if out.passed() { 0 } else { 1 })
}
