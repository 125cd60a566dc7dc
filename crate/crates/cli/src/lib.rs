//! Command-line front end: retrofit training, cache simulation, budget sweeps
//! and cost-model queries.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

mod costmodel;
mod pareto;
mod simulate;
mod train;

pub use costmodel::CostConfig;
pub use pareto::ParetoConfig;
pub use simulate::{DecisionScript, SimulateConfig};
pub use train::{CorpusConfig, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

pub(crate) fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "dms", version, about = "Dynamic memory sparsification toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain or load a teacher and retrofit it with learned eviction.
    Train(Common),
    /// Run a model through the paged cache under an eviction policy.
    Simulate(Common),
    /// Sweep L-W-CR budgets (or read a sweep table) and report frontiers.
    Pareto(Common),
    /// Per-step FLOPs, HBM reads and latency of a model profile.
    Costmodel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        batch: Option<u64>,
        #[arg(long)]
        seq_len: Option<u64>,
    },
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub profile: Option<String>,
}

impl Common {
    pub(crate) fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => train::run(&c),
        Command::Simulate(c) => simulate::run(&c),
        Command::Pareto(c) => pareto::run(&c),
        Command::Costmodel { common, batch, seq_len } => costmodel::run(&common, batch, seq_len),
    }
}

/// Parses `path` (or the defaults when absent).
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub(crate) fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(config_err)?;
    write_file(path, text + "\n")
}

pub(crate) fn require_positive(field: &str, v: usize) -> Result<(), CliError> {
    if v == 0 {
        return Err(CliError::Config(format!("{field} must be >= 1")));
    }
    Ok(())
}
