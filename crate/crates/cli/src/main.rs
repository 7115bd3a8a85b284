use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use ano_core::harness::{
    emit_plot_data, run_benchmark, run_verify, score_references, BenchmarkOptions, ExperimentConfig, FlatConfig,
    PlotKind, RunConfig, VerifyOptions,
};
use ano_core::policy::save_checkpoint;
use ano_core::trainer::{evaluate, train, EvalConfig};
use ano_core::Error;

#[derive(Parser)]
#[command(name = "ano", version, about = "Ratio-shaped policy optimization: checks, training, benchmarks")]
struct Cli {
    /// Omit wall-clock timestamps so reports are byte-reproducible.
    #[arg(long, global = true)]
    fixed_clock: bool,

    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every property check and write a JSON report.
    Verify {
        #[arg(long, default_value = "verify_report.json")]
        out: PathBuf,
    },
    /// Train one policy from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed and ANO_SEED.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "train_out")]
        out: PathBuf,
    },
    /// Train and evaluate every (kernel, learning rate, seed) cell of an experiment.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Parallel worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory; overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit CSV data for plotting.
    Plot {
        /// kernel_geometry, training_curves or aggregate_bars.
        #[arg(long)]
        kind: String,
        /// Metrics CSV (training_curves) or report JSON (aggregate_bars).
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Trust-region radius for kernel_geometry.
        #[arg(long, default_value_t = 0.2)]
        epsilon: f64,
    },
}

enum Outcome {
    Success,
    Failure,
}

fn seed_override(flag: Option<u64>) -> anyhow::Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("ANO_SEED") {
        Ok(v) => Ok(Some(v.trim().parse().map_err(|_| Error::Config(format!("ANO_SEED `{v}` is not an integer")))?)),
        Err(_) => Ok(None),
    }
}

fn verify(out: &Path) -> anyhow::Result<Outcome> {
    let report = run_verify(VerifyOptions::default())?;
    report.write(out).with_context(|| format!("writing {}", out.display()))?;
    for check in &report.checks {
        println!(
            "{} {:<40} measured {:.3e} tolerance {:.1e}",
            if check.passed { "PASS" } else { "FAIL" },
            check.name,
            check.measured,
            check.tolerance
        );
    }
    println!("report written to {}", out.display());
    Ok(if report.all_passed { Outcome::Success } else { Outcome::Failure })
}

fn train_cmd(config: &Path, seed: Option<u64>, out: &Path) -> anyhow::Result<Outcome> {
    let mut run = RunConfig::from_flat(&FlatConfig::load(config)?)?;
    if let Some(seed) = seed_override(seed)? {
        run.train.seed = seed;
    }
    let outcome = match train(&run.env, &run.train, Some(out)) {
        Ok(outcome) => outcome,
        Err(e @ Error::NonFiniteLoss(_)) => {
            eprintln!("training aborted: {e}");
            return Ok(Outcome::Failure);
        }
        Err(e) => return Err(e.into()),
    };
    let ckpt = out.join("params.ckpt");
    save_checkpoint(&outcome.final_params, &ckpt)?;
    let refs = score_references(&run.env, &run.train)?;
    let eval = EvalConfig { episodes: 100, gamma: refs.eval_gamma, greedy: true, seed: run.train.seed };
    let returns = evaluate(&outcome.final_params, &run.env, eval)?;
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let score = ano_core::harness::normalized_score(mean, refs.random, refs.expert)?;
    let summary = serde_json::json!({
        "env": run.env.name(),
        "kernel": run.train.kernel.to_string(),
        "seed": run.train.seed,
        "updates": outcome.history.len(),
        "eval_mean_return": mean,
        "normalized_score": score,
        "metrics_csv": outcome.metrics_csv_path,
        "checkpoint": ckpt,
    });
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    std::fs::write(out.join("summary.json"), &text)?;
    print!("{text}");
    Ok(Outcome::Success)
}

fn bench(config: &Path, jobs: usize, out: Option<PathBuf>, fixed_clock: bool) -> anyhow::Result<Outcome> {
    let mut cfg = ExperimentConfig::from_flat(&FlatConfig::load(config)?)?;
    if out.is_some() {
        cfg.out_dir = out;
    }
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(PathBuf::from("bench_out"));
    }
    let report = run_benchmark(&cfg, BenchmarkOptions { jobs, fixed_clock })?;
    println!("{:<10} {:>10} {:>8} {:>8} {:>19} {:>6}", "kernel", "lr", "mean", "iqm", "iqm 95% ci", "failed");
    for g in &report.groups {
        println!(
            "{:<10} {:>10.2e} {:>8.4} {:>8.4} [{:>8.4}, {:>8.4}] {:>6}",
            g.kernel, g.learning_rate, g.mean, g.iqm, g.iqm_ci_low, g.iqm_ci_high, g.failed_cells
        );
    }
    for d in &report.degradation {
        println!("{:<10} degradation {:.2e} -> {:.2e}: median {:+.3}%", d.kernel, d.reference_lr, d.stress_lr, d.median_percent);
    }
    for r in &report.robustness {
        println!(
            "robustness at lr {:.2e} (soft): ano <= ppo degradation {:?}, ano collapses <= spo {:?}",
            r.stress_lr, r.ano_degrades_no_more_than_ppo, r.ano_collapses_no_more_than_spo
        );
    }
    if let Some(dir) = &cfg.out_dir {
        println!("report written to {}", dir.join("report.json").display());
    }
    Ok(Outcome::Success)
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Verify { out } => verify(&out),
        Command::Train { config, seed, out } => train_cmd(&config, seed, &out),
        Command::Bench { config, jobs, out } => bench(&config, jobs, out, cli.fixed_clock),
        Command::Plot { kind, input, out, epsilon } => {
            let kind: PlotKind = kind.parse()?;
            let path = emit_plot_data(kind, input.as_deref(), &out, epsilon)?;
            println!("{}", path.display());
            Ok(Outcome::Success)
        }
    }
}

fn is_usage(err: &anyhow::Error) -> bool {
    matches!(err.downcast_ref::<Error>(), Some(Error::Usage(_) | Error::Config(_) | Error::Domain(_)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Failure) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_usage(&err) { 2 } else { 1 })
        }
    }
}
