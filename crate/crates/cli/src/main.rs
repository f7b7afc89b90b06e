mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{keys_help, ConfigError, ExperimentConfig};

/// Adams-Bashforth output caching for diffusion and flow samplers, run
/// against analytic oracles.
#[derive(Parser)]
#[command(name = "abcache", version, after_long_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the cached sampler (or the baseline when interval = 1); writes
    /// trajectory.csv and summary.json.
    Sample(RunArgs),
    /// Run the sampler with a predictor call on every step.
    Baseline(RunArgs),
    /// Convergence-order study; writes convergence.json.
    Convergence(ConvergenceArgs),
    /// Scale factor along the step grid; writes scale_factor.csv.
    ScaleFactor(RunArgs),
    /// Similarity of consecutive predictor outputs along a full run;
    /// writes similarity.csv.
    Similarity(RunArgs),
    /// Print the order-k Adams-Bashforth weights as exact fractions.
    Weights(WeightsArgs),
    /// Time baseline against cached runs; writes bench.json.
    Bench(BenchArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (`key = value` lines; see `--help`).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory [default: $ABCACHE_OUT_DIR, then ./abcache-out].
    #[arg(short, long)]
    out_dir: Option<PathBuf>,
    /// Noise schedule: vp-linear, vp-cosine or flow-linear [default: vp-linear].
    #[arg(long)]
    schedule: Option<String>,
    /// Oracle: gaussian or mixture [default: gaussian].
    #[arg(long)]
    oracle: Option<String>,
    /// State dimension [default: 8].
    #[arg(long)]
    dim: Option<usize>,
    /// Extrapolation order k, 1..4 [default: 3].
    #[arg(long)]
    order: Option<usize>,
    /// Cache refresh interval T [default: 3].
    #[arg(long)]
    interval: Option<usize>,
    /// Number of steps N [default: 50].
    #[arg(long)]
    steps: Option<usize>,
    /// diffusion or flow [default: diffusion].
    #[arg(long)]
    mode: Option<String>,
    /// uniform-t or uniform-lambda [default: uniform-t].
    #[arg(long)]
    spacing: Option<String>,
    /// Reject grids that are not uniform in the extrapolation coordinate.
    #[arg(long)]
    strict: bool,
    /// Do not force a predictor call on the last step.
    #[arg(long)]
    no_final_eval: bool,
    /// Initial-noise seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Set any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved configuration as a config file and exit.
    #[arg(long)]
    print_config: bool,
}

impl RunArgs {
    /// Defaults, then the config file, then flags.
    fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let mut flags: Vec<(&str, String)> = Vec::new();
        let mut push = |k, v: Option<String>| {
            if let Some(v) = v {
                flags.push((k, v));
            }
        };
        push("schedule", self.schedule.clone());
        push("oracle", self.oracle.clone());
        push("dim", self.dim.map(|v| v.to_string()));
        push("order", self.order.map(|v| v.to_string()));
        push("interval", self.interval.map(|v| v.to_string()));
        push("steps", self.steps.map(|v| v.to_string()));
        push("mode", self.mode.clone());
        push("spacing", self.spacing.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("strict", self.strict.then(|| "true".into()));
        push("final_eval", self.no_final_eval.then(|| "false".into()));
        for (k, v) in flags {
            cfg.set(k, &v)?;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = Some(dir.clone());
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Study {
    /// Extrapolate exact outputs of the Gaussian oracle over `h_values`.
    Extrapolation,
    /// First-order solver endpoint error over `step_counts`.
    Solver,
    /// Cached-output error inside the sampler over `step_counts`.
    Sampler,
    /// Errors planted as h^p over `h_values`; checks the estimator.
    Synthetic,
}

#[derive(Args)]
struct ConvergenceArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, default_value_t = Study::Extrapolation)]
    study: Study,
    /// Order p of the planted errors for the synthetic study.
    #[arg(long, default_value_t = 4)]
    synthetic_order: i32,
}

#[derive(Args)]
struct WeightsArgs {
    /// Order k, 1..5.
    k: usize,
    /// Print every weight over the least common denominator.
    #[arg(long)]
    common_denominator: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Timed repetitions per sampler; the fastest is reported.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Busy-wait added to each predictor call, standing in for a network.
    #[arg(long, default_value_t = 0)]
    eval_delay_us: u64,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let run_args = match &cli.command {
        Command::Sample(a)
        | Command::Baseline(a)
        | Command::ScaleFactor(a)
        | Command::Similarity(a) => Some(a),
        Command::Convergence(a) => Some(&a.run),
        Command::Bench(a) => Some(&a.run),
        Command::Weights(_) => None,
    };
    if let Some(a) = run_args.filter(|a| a.print_config) {
        print!("{}", a.resolve()?.to_text());
        return Ok(());
    }
    match cli.command {
        Command::Sample(a) => commands::sample(&a.resolve()?, false),
        Command::Baseline(a) => commands::sample(&a.resolve()?, true),
        Command::Convergence(a) => {
            commands::convergence(&a.run.resolve()?, a.study, a.synthetic_order)
        }
        Command::ScaleFactor(a) => commands::scale_factor(&a.resolve()?),
        Command::Similarity(a) => commands::similarity(&a.resolve()?),
        Command::Weights(a) => commands::weights(a.k, a.common_denominator),
        Command::Bench(a) => commands::bench(&a.run.resolve()?, a.repeats, a.eval_delay_us),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else if err.downcast_ref::<abcache::Error>().is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
