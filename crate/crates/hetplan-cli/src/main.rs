mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{PlanArgs, SimArgs, TraceFormat};
use hetplan::{Error, Result};
use report::Ctx;

const EXIT_CHECK_FAILED: i32 = 1;
const EXIT_INPUT: i32 = 2;
const EXIT_INFEASIBLE: i32 = 3;

#[derive(Parser)]
#[command(name = "hetplan", version, about = "Plan batch sizes, gradient accumulation and state sharding on heterogeneous GPU clusters")]
struct Cli {
    /// Write the run report here instead of stderr.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Problem {
    #[arg(long)]
    cluster: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Fitted performance models written by `hetplan fit`.
    #[arg(long)]
    perf: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Fit latency and memory models to profile files.
    Fit {
        #[arg(required = true)]
        profiles: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        /// First microbatch size used for the linear extrapolation fit.
        #[arg(long)]
        linear_start: Option<u32>,
    },
    /// Choose per-GPU batch, microbatch and state shares.
    Plan {
        #[command(flatten)]
        problem: Problem,
        /// Override the model file's global batch.
        #[arg(long)]
        batch: Option<u32>,
        #[arg(long)]
        allow_idle: bool,
        /// Warn when the estimated optimizer work exceeds this many seconds.
        #[arg(long)]
        time_budget: Option<f64>,
        #[arg(short, long)]
        out: PathBuf,
        /// Directory for latency and throughput CSV tables.
        #[arg(long)]
        emit_csv: Option<PathBuf>,
    },
    /// Simulate one training iteration of a plan.
    Simulate {
        #[arg(long)]
        plan: PathBuf,
        #[command(flatten)]
        problem: Problem,
        #[arg(long, overrides_with = "no_offload")]
        offload: bool,
        #[arg(long)]
        no_offload: bool,
        /// Host link bandwidth in GB/s; unlimited when omitted.
        #[arg(long)]
        offload_bandwidth: Option<f64>,
        /// Boundary activation size per sample in MiB.
        #[arg(long)]
        activation_mib: Option<f64>,
        #[arg(long)]
        recompute_factor: Option<f64>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "jsonl")]
        trace_format: TraceFormat,
        #[arg(long)]
        emit_csv: Option<PathBuf>,
    },
    /// Validation checks; exit 1 on failure.
    #[command(subcommand)]
    Check(Check),
}

#[derive(Subcommand)]
enum Check {
    /// Check a plan against the cluster, model and memory constraints.
    Plan {
        #[arg(long)]
        plan: PathBuf,
        #[command(flatten)]
        problem: Problem,
    },
    /// Check gradient reweighting on a fixture file or random fixtures.
    Grad {
        #[arg(long, conflicts_with = "random")]
        fixture: Option<PathBuf>,
        #[arg(long)]
        random: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Compare the optimizer with exhaustive search on random instances.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        instances: usize,
    },
}

/// `HETPLAN_THREADS`, 0 meaning one thread per core.
fn threads_from_env() -> Result<usize> {
    match std::env::var("HETPLAN_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("HETPLAN_THREADS must be a non-negative integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn inputs(ctx: &mut Ctx, p: &Problem) -> Result<commands::Inputs> {
    commands::load_inputs(ctx, &p.cluster, &p.model, &p.perf)
}

fn run(ctx: &mut Ctx, command: Command) -> Result<i32> {
    match command {
        Command::Fit {
            profiles,
            out,
            linear_start,
        } => commands::fit(ctx, &profiles, &out, linear_start),
        Command::Plan {
            problem,
            batch,
            allow_idle,
            time_budget,
            out,
            emit_csv,
        } => {
            let threads = threads_from_env()?;
            let inp = inputs(ctx, &problem)?;
            let args = PlanArgs {
                batch,
                allow_idle,
                time_budget,
                threads,
                out: &out,
                emit_csv: emit_csv.as_deref(),
            };
            commands::plan(ctx, inp, args)
        }
        Command::Simulate {
            plan,
            problem,
            offload: _,
            no_offload,
            offload_bandwidth,
            activation_mib,
            recompute_factor,
            trace_out,
            trace_format,
            emit_csv,
        } => {
            let inp = inputs(ctx, &problem)?;
            let args = SimArgs {
                offload: !no_offload,
                bandwidth_gbs: offload_bandwidth,
                activation_mib,
                recompute_factor,
                trace_out: trace_out.as_deref(),
                trace_format,
                emit_csv: emit_csv.as_deref(),
            };
            commands::simulate(ctx, &plan, inp, args)
        }
        Command::Check(Check::Plan { plan, problem }) => {
            let inp = inputs(ctx, &problem)?;
            commands::check_plan(ctx, &plan, inp)
        }
        Command::Check(Check::Grad {
            fixture,
            random,
            seed,
            count,
        }) => {
            if fixture.is_none() && !random {
                return Err(Error::Validation("check grad needs --fixture or --random".into()));
            }
            commands::check_grad(ctx, fixture.as_deref(), seed, count)
        }
        Command::Check(Check::Oracle { seed, instances }) => commands::check_oracle(ctx, seed, instances),
    }
}

fn name(c: &Command) -> &'static str {
    match c {
        Command::Fit { .. } => "fit",
        Command::Plan { .. } => "plan",
        Command::Simulate { .. } => "simulate",
        Command::Check(Check::Plan { .. }) => "check plan",
        Command::Check(Check::Grad { .. }) => "check grad",
        Command::Check(Check::Oracle { .. }) => "check oracle",
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_infeasible() {
        EXIT_INFEASIBLE
    } else {
        EXIT_INPUT
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT as u8 } else { 0 });
        }
    };
    let mut ctx = Ctx::new(name(&cli.command));
    let report = cli.report.clone();
    let (code, error) = match run(&mut ctx, cli.command) {
        Ok(code) => (code, None),
        Err(e) => {
            eprintln!("error: {e}");
            (exit_code(&e), Some(e.to_string()))
        }
    };
    debug_assert!(code == 0 || code == EXIT_CHECK_FAILED || code >= EXIT_INPUT);
    ctx.finish(code, error, report.as_ref());
    ExitCode::from(code as u8)
}
