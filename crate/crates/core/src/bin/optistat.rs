use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use optistat::bench::{
    load_config, pendulum_bench_config, run_experiment, validate, Algorithm, BenchError, ExperimentConfig, Outcome,
};

#[derive(Parser)]
#[command(name = "optistat", version, about = "Policy iteration and data-driven learning for stochastic LQ control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Model-based policy iteration with a Riccati cross-check.
    Solve(RunArgs),
    /// Simulate one exploratory rollout per seed and run OLSbPI on it.
    Learn(RunArgs),
    /// Write simulated trajectories.
    Simulate(RunArgs),
    /// Policy iteration under injected disturbances, swept over magnitudes.
    Robust(RunArgs),
    /// The triple inverted pendulum learning benchmark.
    BenchPendulum(CommonArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct CommonArgs {
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Only print errors.
    #[arg(long)]
    quiet: bool,
}

fn run(cfg: ExperimentConfig, algorithm: Algorithm, common: &CommonArgs) -> Result<Outcome, BenchError> {
    let mut cfg = cfg;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let exp = validate(&cfg, algorithm)?;
    let outcome = run_experiment(&exp, &out)?;
    if !common.quiet {
        eprintln!("{} finished; results in {}", algorithm.name(), out.display());
        for run in outcome.summary["runs"].as_array().into_iter().flatten() {
            if let Some(err) = run["final_gain_error"].as_f64() {
                eprintln!(
                    "  seed {}: final gain error {:.3e}, cond psi {:.2e}",
                    run["seed"], err, run["cond_psi"].as_f64().unwrap_or(f64::NAN)
                );
            }
        }
        if let Some(r) = outcome.summary["final_residual"].as_f64() {
            eprintln!("  final Riccati residual {r:.3e}");
        }
    }
    Ok(outcome)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BenchPendulum(common) => {
            let seeds = if common.seed.is_some() { vec![] } else { vec![1, 2, 3, 4, 5] };
            run(pendulum_bench_config(seeds), Algorithm::Learn, common)
        }
        Command::Solve(a) | Command::Learn(a) | Command::Simulate(a) | Command::Robust(a) => {
            let algorithm = match &cli.command {
                Command::Solve(_) => Algorithm::Solve,
                Command::Learn(_) => Algorithm::Learn,
                Command::Simulate(_) => Algorithm::Simulate,
                _ => Algorithm::Robust,
            };
            load_config(&a.config).and_then(|cfg| run(cfg, algorithm, &a.common))
        }
    };
    match result {
        Ok(outcome) if outcome.failures.is_empty() => ExitCode::SUCCESS,
        Ok(outcome) => {
            for f in &outcome.failures {
                eprintln!("error: {f}");
            }
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
