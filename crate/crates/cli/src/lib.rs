//! Experiment pipeline behind the `latentservo` command.
//!
//! Every subcommand reads the run directory written by earlier stages and
//! records its own outputs in `manifest.json`.

pub mod config;
pub mod manifest;
mod report;
mod stages;
pub mod svg;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;
pub use manifest::{RunManifest, StageRecord, StageStatus};
pub use stages::STAGES;

pub const THREADS_ENV: &str = "LATENTSERVO_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage failed: {0}")]
    Stage(String),
    #[error("manifest unreadable: {0}")]
    Manifest(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage(_) => 3,
            CliError::Manifest(_) | CliError::Io(_) => 4,
        }
    }
}

impl From<latentservo_core::Error> for CliError {
    fn from(e: latentservo_core::Error) -> Self {
        match e {
            latentservo_core::Error::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Stage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "latentservo", version, about = "Latent-space analysis and control on a 2D hand-eye toy task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Re-run stages even when their inputs are unchanged.
    #[arg(long)]
    pub force: bool,
    /// Overrides the global seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render teacher and executor demonstrations.
    DemoGen(Common),
    /// Train the representation models.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train only this method.
        #[arg(long)]
        method: Option<String>,
        /// Extra latent sizes for the non-SAE methods, e.g. `50,100`.
        #[arg(long, value_delimiter = ',')]
        latent_dim: Vec<usize>,
    },
    /// Encode demonstrations into task maps.
    Taskmap(Common),
    /// Extract time-varying factors.
    Factors(Common),
    /// Score β-VAE weights over the configured α values.
    AlphaSweep(Common),
    /// Encode the workspace grid and measure monotonicity and injectivity.
    Fieldmap(Common),
    /// Compare teacher and executor factor behaviour.
    Embodiment(Common),
    /// Evaluate uncalibrated visual servoing.
    Servo(Common),
    /// Train and evaluate guided REINFORCE.
    Reinforce(Common),
    /// Collect controller success rates into one table.
    Evaluate(Common),
    /// Summarize a run directory as Markdown.
    Report(Common),
    /// Every stage in order, then the report.
    Pipeline(Common),
}

/// Caps the rayon pool from `LATENTSERVO_THREADS`. Only the first call in a
/// process has an effect.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("thread pool already initialized");
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Report(common) => report::cmd_report(&stages::run_dir(&common)?),
        Command::Train { common, method, latent_dim } => {
            let mut run = stages::Run::open(&common)?;
            let only = method
                .map(|m| m.parse())
                .transpose()
                .map_err(|e: latentservo_core::Error| CliError::Config(e.to_string()))?;
            if let Some(m) = only {
                if run.cfg.method(m).is_none() {
                    return Err(CliError::Config(format!("--method {m} is not in the config")));
                }
            }
            if latent_dim.contains(&0) {
                return Err(CliError::Config("--latent-dim values must be positive".into()));
            }
            run.cmd_train(only, &latent_dim)
        }
        Command::Pipeline(common) => {
            let mut run = stages::Run::open(&common)?;
            for stage in STAGES {
                run.dispatch(stage)?;
            }
            report::cmd_report(&run.dir)
        }
        other => {
            let (name, common) = match other {
                Command::DemoGen(c) => ("demo-gen", c),
                Command::Taskmap(c) => ("taskmap", c),
                Command::Factors(c) => ("factors", c),
                Command::AlphaSweep(c) => ("alpha-sweep", c),
                Command::Fieldmap(c) => ("fieldmap", c),
                Command::Embodiment(c) => ("embodiment", c),
                Command::Servo(c) => ("servo", c),
                Command::Reinforce(c) => ("reinforce", c),
                Command::Evaluate(c) => ("evaluate", c),
                Command::Report(_) | Command::Train { .. } | Command::Pipeline(_) => unreachable!(),
            };
            stages::Run::open(&common)?.dispatch(name)
        }
    }
}
