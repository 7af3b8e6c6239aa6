//! The `cfl` command-line tool: generate synthetic logs, train and evaluate
//! policies with any estimator, and run the gradient and degeneracy checks.

pub mod commands;
pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use cfl_core::optimizer::Init;
use cfl_core::EstimatorKind;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cfl_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    /// A check ran and found violations.
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    /// 1 for usage, config and IO errors, 2 for failed checks.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_init(s: &str) -> Result<Init, String> {
    match s {
        "zero" => Ok(Init::Zero),
        "gaussian" => Ok(Init::Gaussian),
        "logger" => Ok(Init::Logger),
        _ => Err(format!("expected zero, gaussian or logger, got `{s}`")),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cfl",
    version,
    about = "Counterfactual learning from logged bandit feedback"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a task and write train/validation/test logs, ground truth and the logger.
    GenerateLog(GenerateArgs),
    /// Train a policy on a log with one estimator.
    Train(TrainArgs),
    /// Score a policy on one or more logs.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every analytic gradient family.
    GradCheck(GradCheckArgs),
    /// Check the degenerate-optimum inequalities on simulated logs.
    DegeneracyProbe(ProbeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the task seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config; its `train` section is used. Without it the
    /// defaults apply and `--estimator` is required.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training log (JSON Lines).
    #[arg(long)]
    pub log: PathBuf,
    /// Validation log, needed for early stopping.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Ground truth, to record the true reward in the trace.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Logging policy, needed for `--init logger`.
    #[arg(long)]
    pub logger: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(EstimatorKind))]
    pub estimator: Option<EstimatorKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_init)]
    pub init: Option<Init>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub params: PathBuf,
    /// Log to score; repeatable. The file stem names the split.
    #[arg(long = "log", required = true)]
    pub logs: Vec<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub logger: Option<PathBuf>,
    /// Estimator to report; repeatable. Defaults to every estimator valid
    /// for each log's mode.
    #[arg(long = "estimator", value_parser = clap::value_parser!(EstimatorKind))]
    pub estimators: Vec<EstimatorKind>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Problems per gradient family.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Negates every analytic gradient; the check must then fail.
    #[arg(long, hide = true)]
    pub inject_wrong_sign: bool,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Simulated logs per log mode.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Probe this log instead of simulated ones.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs one command and returns the text to print on stdout.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::GenerateLog(a) => commands::generate_log(&a),
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::GradCheck(a) => commands::grad_check(&a),
        Command::DegeneracyProbe(a) => commands::degeneracy_probe(&a),
    }
}
