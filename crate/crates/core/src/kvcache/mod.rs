//! Inference-time paged KV cache, read ledger and incremental decoding.

mod cache;
mod engine;
mod ledger;
mod runner;

pub use cache::{Entry, PageAccounting, PagedKVCache, SlotId, DEFAULT_PAGE_SIZE};
pub use engine::{Admission, CachePolicy, DecodeEngine, DelayedEviction, HeadWeights, StepOutput, Vanilla};
pub use ledger::{measured_cr, LedgerRecord, ReadLedger};
pub use runner::{DecisionSource, ModelRunner};

use crate::numerics::NumericsError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CacheError {
    #[error("invalid cache configuration: {0}")]
    Config(String),
    #[error("no KV head ({layer}, {head})")]
    NoSuchHead { layer: usize, head: usize },
    #[error("entry width mismatch: expected {expected}, key {key}, value {value}")]
    Dim { expected: usize, key: usize, value: usize },
    #[error("position {position} is not after last appended position {last}")]
    PositionOrder { position: usize, last: usize },
    #[error("KV head ({layer}, {head}) has no entry to attend or merge into")]
    EmptyHead { layer: usize, head: usize },
    #[error("expected {expected} per-head decisions, found {found}")]
    Decisions { expected: usize, found: usize },
    #[error("no live entries")]
    NoLiveEntries,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
