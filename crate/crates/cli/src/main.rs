// NaN must fail these guards
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod experiments;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Experiment, ExperimentConfig};
use experiments::{RunError, RunLog};

/// Confounding-robust bounds on offline policy value.
#[derive(Parser)]
#[command(name = "crisp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lower and upper bounds over a Gamma grid for each estimator.
    BoundsVsGamma(RunArgs),
    /// KCMC bounds under each f-divergence over a budget grid.
    FSensitivity(RunArgs),
    /// Bounds with plain and bias-corrected confidence intervals.
    Ci(RunArgs),
    /// Interval acceptance rates over repeated synthetic samples.
    Coverage(RunArgs),
    /// Raw, GIC and cross-validated bounds by basis dimension.
    ModelSelect(RunArgs),
    /// Gradient ascent on the lower bound.
    PolicyLearn(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` file; later `--key value` flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides such as `--n 500 --gammas 1,2,3`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

fn set_threads() {
    let Ok(v) = std::env::var("CRISP_THREADS") else { return };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("cannot size thread pool: {e}");
            }
        }
        _ => log::warn!("ignoring CRISP_THREADS={v}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    set_threads();
    let (experiment, args) = match cli.command {
        Command::BoundsVsGamma(a) => (Experiment::BoundsVsGamma, a),
        Command::FSensitivity(a) => (Experiment::FSensitivity, a),
        Command::Ci(a) => (Experiment::Ci, a),
        Command::Coverage(a) => (Experiment::Coverage, a),
        Command::ModelSelect(a) => (Experiment::ModelSelect, a),
        Command::PolicyLearn(a) => (Experiment::PolicyLearn, a),
    };
    let cfg = match ExperimentConfig::load(experiment, args.config.as_deref(), &args.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("crisp: configuration error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = std::fs::create_dir_all(&cfg.out) {
        eprintln!("crisp: cannot create {}: {e}", cfg.out.display());
        return ExitCode::from(2);
    }
    let mut log = match RunLog::open(&cfg.out.join("run.log")) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("crisp: cannot open run log: {e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = std::fs::write(cfg.out.join("config.txt"), format!("{}\n", cfg.describe())) {
        eprintln!("crisp: cannot write config echo: {e}");
        return ExitCode::from(1);
    }
    log.line(format!("start {}", experiment.name()));
    match experiments::run(&cfg, &mut log) {
        Ok(o) if o.failures == 0 => {
            log.line("done");
            ExitCode::SUCCESS
        }
        Ok(o) => {
            log.line(format!("done with {} failed tasks", o.failures));
            eprintln!("crisp: {} tasks failed; see {}", o.failures, cfg.out.join("run.log").display());
            ExitCode::from(1)
        }
        Err(RunError::Input(e)) => {
            log.line(format!("input error: {e}"));
            eprintln!("crisp: input error: {e}");
            ExitCode::from(2)
        }
        Err(RunError::Fatal(e)) => {
            log.line(format!("aborted: {e}"));
            eprintln!("crisp: {e}");
            ExitCode::from(1)
        }
    }
}
