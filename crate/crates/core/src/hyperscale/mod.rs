//! Budget sweeps over length, width and compression, multi-chain
//! aggregation, Pareto frontiers and frontier-to-frontier improvement.

mod aggregate;
mod pareto;
mod sweep;
mod tasks;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use aggregate::{majority, pass_at_all, AggregateError};
pub use pareto::{avg_improvement, dominates, pareto_extract, Improvement};
pub use sweep::{
    frontier_rows, improvement_rows, read_sweep_csv, sweep, write_sweep_csv, write_sweep_jsonl, Axis, FrontierRow,
    ImprovementRow, SweepPoint, SweepRecord, SweepSpec,
};
pub use tasks::{ChainOutcome, TaskInstance, TaskKind, TaskSuite};

#[derive(Debug, thiserror::Error)]
pub enum ScaleError {
    #[error("invalid budget config: {0}")]
    Config(String),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Policy(#[from] crate::baselines::PolicyError),
    #[error(transparent)]
    Cache(#[from] crate::kvcache::CacheError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error("table error: {0}")]
    Table(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One `L-W-CR` scaling configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    /// Maximum sequence length per chain, prompt included.
    pub l: usize,
    /// Parallel chains.
    pub w: usize,
    /// Compression ratio, 1 for a dense cache.
    pub cr: f64,
}

impl BudgetConfig {
    pub fn new(l: usize, w: usize, cr: f64) -> Result<Self, ScaleError> {
        let c = Self { l, w, cr };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ScaleError> {
        if self.l == 0 || self.w == 0 {
            return Err(ScaleError::Config(format!("L and W must be >= 1 (got {self})")));
        }
        if !(self.cr >= 1.0 && self.cr.is_finite()) {
            return Err(ScaleError::Config(format!("CR must be >= 1 (got {self})")));
        }
        Ok(())
    }
}

impl fmt::Display for BudgetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.l, self.w, self.cr)
    }
}

/// A (budget, score) measurement of one method at one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub budget: f64,
    pub accuracy: f64,
    pub config: BudgetConfig,
    pub method: String,
}

impl FrontierPoint {
    pub fn new(budget: f64, accuracy: f64, config: BudgetConfig, method: impl Into<String>) -> Self {
        Self {
            budget,
            accuracy,
            config,
            method: method.into(),
        }
    }
}
