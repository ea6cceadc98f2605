//! Batch driver: simulate, preprocess, estimate, restore, evaluate.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};
use cryocontrast::config::{ExperimentConfig, Method};
use cryocontrast::experiment::{Experiment, Stage};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Cwf,
    Gs,
    Sdp,
    Oracle,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Cwf => Method::Cwf,
            MethodArg::Gs => Method::Gs,
            MethodArg::Sdp => Method::Sdp,
            MethodArg::Oracle => Method::Oracle,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Simulate,
    Preprocess,
    Estimate,
    Restore,
    Evaluate,
    All,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Simulate => Stage::Simulate,
            StageArg::Preprocess => Stage::Preprocess,
            StageArg::Estimate => Stage::Estimate,
            StageArg::Restore => Stage::Restore,
            StageArg::Evaluate => Stage::Evaluate,
            StageArg::All => Stage::All,
        }
    }
}

/// Contrast estimation and covariance Wiener filtering experiments.
#[derive(Debug, Parser)]
#[command(name = "cryocontrast", version)]
struct Cli {
    /// Experiment configuration (JSON); built-in desk-scale defaults if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 uses all cores).
    #[arg(long, env = "CRYOCONTRAST_THREADS")]
    threads: Option<usize>,
    /// Run a single method family instead of the configured list.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Pipeline stage to run.
    #[arg(long, value_enum, default_value = "all")]
    stage: StageArg,
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.output = out;
    }
    if let Some(m) = cli.method {
        config.methods = vec![m.into()];
    }
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let experiment = Experiment::new(config)?;
    experiment.run(cli.stage.into())?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
