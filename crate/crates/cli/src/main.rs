//! `bayesfair` command-line driver.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Run;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "bayesfair", version, about = "Individual fairness audits for Bayesian neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides the master seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ensemble directory (defaults to `<out>/ensemble`).
    #[arg(long)]
    ensemble: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a posterior and save the ensemble.
    Train(Common),
    /// Fit the similarity metric on the training split.
    FitMetric(Common),
    /// Estimate the maximum fairness violation of a trained ensemble.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Also report the fraction of points with local violation above this value.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Architecture heatmaps and epsilon curves.
    Sweep(Common),
    /// Violation as a function of the number of posterior samples.
    AnalyzePosterior(Common),
    /// Compare the gradient attack against a grid search (inputs of dimension <= 4).
    OracleCheck(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train(c)
            | Command::FitMetric(c)
            | Command::Sweep(c)
            | Command::AnalyzePosterior(c)
            | Command::OracleCheck(c) => c,
            Command::Audit { common, .. } => common,
        }
    }
}

fn execute(cmd: &Command) -> Result<(), CliError> {
    let common = cmd.common();
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    let run = Run::new(cfg)?;
    let jobs = match common.jobs {
        Some(0) => return Err(CliError::config("--jobs must be at least 1")),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let ens = common.ensemble.as_deref();
    log::info!("config hash {} with {jobs} jobs", run.hash);
    bayesfair::par::with_jobs(jobs, || match cmd {
        Command::Train(_) => commands::train(&run),
        Command::FitMetric(_) => commands::fit_metric_cmd(&run),
        Command::Audit { delta, .. } => commands::audit(&run, ens, *delta),
        Command::Sweep(_) => commands::sweep(&run),
        Command::AnalyzePosterior(_) => commands::analyze_posterior(&run, ens),
        Command::OracleCheck(_) => commands::oracle_check(&run, ens),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
