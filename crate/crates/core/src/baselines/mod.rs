//! Competing eviction and retrieval policies sharing the cache engine.

mod dmc;
mod h2o;
mod immediate;
mod quest;
mod tova;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dmc::DmcLite;
pub use h2o::{h2o_choose, H2o};
pub use immediate::ImmediateEviction;
pub use quest::{quest_block_size, quest_select, PageMeta, Quest};
pub use tova::{tova_choose, Tova};

use crate::kvcache::{CachePolicy, DelayedEviction, Vanilla};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("unknown policy '{0}'; valid names: vanilla, dms, dms-immediate, tova, h2o, quest, dmc-lite")]
    Unknown(String),
    #[error("policy {0} needs a KV budget")]
    MissingBudget(&'static str),
    #[error("invalid budget: {0}")]
    Budget(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Vanilla,
    Dms,
    DmsImmediate,
    Tova,
    H2o,
    Quest,
    DmcLite,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::Vanilla,
        PolicyKind::Dms,
        PolicyKind::DmsImmediate,
        PolicyKind::Tova,
        PolicyKind::H2o,
        PolicyKind::Quest,
        PolicyKind::DmcLite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Vanilla => "vanilla",
            PolicyKind::Dms => "dms",
            PolicyKind::DmsImmediate => "dms-immediate",
            PolicyKind::Tova => "tova",
            PolicyKind::H2o => "h2o",
            PolicyKind::Quest => "quest",
            PolicyKind::DmcLite => "dmc-lite",
        }
    }

    pub fn needs_budget(self) -> bool {
        matches!(self, PolicyKind::Tova | PolicyKind::H2o | PolicyKind::Quest)
    }

    /// Whether binary gate decisions drive the policy.
    pub fn uses_decisions(self) -> bool {
        matches!(self, PolicyKind::Dms | PolicyKind::DmsImmediate | PolicyKind::DmcLite)
    }

    /// Page size the cache should use: Quest pages are its retrieval blocks.
    pub fn page_size(self, default: usize, cr: f64) -> usize {
        match self {
            PolicyKind::Quest => quest_block_size(cr),
            _ => default,
        }
    }

    pub fn build(
        self,
        window: usize,
        budget: Option<PolicyBudget>,
        page_size: usize,
    ) -> Result<Box<dyn CachePolicy>, PolicyError> {
        let need = |b: Option<PolicyBudget>| b.ok_or(PolicyError::MissingBudget(self.name()));
        Ok(match self {
            PolicyKind::Vanilla => Box::new(Vanilla),
            PolicyKind::Dms => Box::new(DelayedEviction { window }),
            PolicyKind::DmsImmediate => Box::new(ImmediateEviction { window }),
            PolicyKind::Tova => Box::new(Tova::new(need(budget)?.kv_budget)),
            PolicyKind::H2o => Box::new(H2o::new(need(budget)?)),
            PolicyKind::Quest => Box::new(Quest::new(need(budget)?.kv_budget, page_size)),
            PolicyKind::DmcLite => Box::new(DmcLite),
        })
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| PolicyError::Unknown(s.to_string()))
    }
}

/// KV budget of the fixed-size baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyBudget {
    pub kv_budget: usize,
}

impl PolicyBudget {
    pub fn new(kv_budget: usize) -> Result<Self, PolicyError> {
        if kv_budget == 0 {
            return Err(PolicyError::Budget("kv_budget must be at least 1".into()));
        }
        Ok(Self { kv_budget })
    }

    /// `floor((input_len + max_gen_len) / cr)`.
    pub fn from_lengths(input_len: usize, max_gen_len: usize, cr: f64) -> Result<Self, PolicyError> {
        if !(cr >= 1.0) || !cr.is_finite() {
            return Err(PolicyError::Budget(format!("compression ratio {cr} must be >= 1")));
        }
        Self::new(((input_len + max_gen_len) as f64 / cr).floor() as usize)
    }

    /// H2O halves: `(recent, heavy)`.
    pub fn split(&self) -> (usize, usize) {
        (self.kv_budget.div_ceil(2), self.kv_budget / 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in PolicyKind::ALL {
            assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
        }
        let err = "lru".parse::<PolicyKind>().unwrap_err().to_string();
        assert!(err.contains("dmc-lite") && err.contains("tova"));
    }

    #[test]
    fn budgets() {
        assert_eq!(PolicyBudget::from_lengths(100, 300, 4.0).unwrap().kv_budget, 100);
        assert_eq!(PolicyBudget::from_lengths(10, 5, 4.0).unwrap().kv_budget, 3);
        assert!(PolicyBudget::from_lengths(1, 1, 4.0).is_err());
        for b in 1..40 {
            let (r, h) = PolicyBudget::new(b).unwrap().split();
            assert_eq!(r + h, b);
            assert!(r - h <= 1);
        }
    }
}
