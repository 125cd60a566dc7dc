//! Read and memory accounting for one sequence.

use serde::{Deserialize, Serialize};

use super::CacheError;

/// Per-step attended-entry counts and peak residency.
///
/// Counts are raw sums over every `(layer, kv_head)` store; the `*_tokens`
/// accessors divide by the store count to give token units.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReadLedger {
    stores: usize,
    per_step: Vec<u64>,
    reads_total: u64,
    prefill_reads: u64,
    prefill_tokens: usize,
    peak: u64,
    per_head_live: Vec<usize>,
}

/// Exported summary of a ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub steps: usize,
    pub reads_total: f64,
    pub peak_tokens: f64,
    pub per_head_live: Vec<usize>,
    pub measured_cr: Option<f64>,
}

impl ReadLedger {
    pub fn new(stores: usize) -> Self {
        Self {
            stores: stores.max(1),
            ..Self::default()
        }
    }

    pub fn stores(&self) -> usize {
        self.stores
    }

    /// Records one decode step: entries attended across all stores, and the
    /// resident count once the step has finished.
    pub fn record_step(&mut self, reads: u64, resident: u64, per_head_live: Vec<usize>) {
        self.per_step.push(reads);
        self.reads_total += reads;
        self.peak = self.peak.max(resident);
        self.per_head_live = per_head_live;
    }

    /// Records the prompt phase. Its reads are kept out of the decode total.
    pub fn record_prefill(&mut self, tokens: usize, reads: u64, resident: u64, per_head_live: Vec<usize>) {
        self.prefill_tokens += tokens;
        self.prefill_reads += reads;
        self.peak = self.peak.max(resident);
        self.per_head_live = per_head_live;
    }

    pub fn steps(&self) -> usize {
        self.per_step.len()
    }

    pub fn per_step(&self) -> &[u64] {
        &self.per_step
    }

    pub fn reads_raw(&self) -> u64 {
        self.reads_total
    }

    pub fn prefill_reads_raw(&self) -> u64 {
        self.prefill_reads
    }

    pub fn peak_raw(&self) -> u64 {
        self.peak
    }

    pub fn reads_tokens(&self) -> f64 {
        self.reads_total as f64 / self.stores as f64
    }

    pub fn prefill_reads_tokens(&self) -> f64 {
        self.prefill_reads as f64 / self.stores as f64
    }

    pub fn peak_tokens(&self) -> f64 {
        self.peak as f64 / self.stores as f64
    }

    pub fn per_head_live(&self) -> &[usize] {
        &self.per_head_live
    }

    /// Tokens seen so far: prompt plus decode steps.
    pub fn elapsed(&self) -> usize {
        self.prefill_tokens + self.per_step.len()
    }

    /// `elapsed / mean live`, aggregated over heads.
    pub fn measured_cr(&self) -> Result<f64, CacheError> {
        measured_cr(&self.per_head_live, self.elapsed()).map(|(_, agg)| agg)
    }

    /// Combines ledgers of concurrently resident sequences. Per-step counts
    /// add by step index, totals and peaks add, live counts add per head.
    pub fn merge(&self, other: &Self) -> Result<Self, CacheError> {
        if self.stores != other.stores {
            return Err(CacheError::Config(format!(
                "cannot merge ledgers over {} and {} stores",
                self.stores, other.stores
            )));
        }
        let n = self.per_step.len().max(other.per_step.len());
        let at = |v: &[u64], i: usize| v.get(i).copied().unwrap_or(0);
        let h = self.per_head_live.len().max(other.per_head_live.len());
        let live_at = |v: &[usize], i: usize| v.get(i).copied().unwrap_or(0);
        Ok(Self {
            stores: self.stores,
            per_step: (0..n).map(|i| at(&self.per_step, i) + at(&other.per_step, i)).collect(),
            reads_total: self.reads_total + other.reads_total,
            prefill_reads: self.prefill_reads + other.prefill_reads,
            prefill_tokens: self.prefill_tokens + other.prefill_tokens,
            peak: self.peak + other.peak,
            per_head_live: (0..h)
                .map(|i| live_at(&self.per_head_live, i) + live_at(&other.per_head_live, i))
                .collect(),
        })
    }

    pub fn record(&self) -> LedgerRecord {
        LedgerRecord {
            steps: self.steps(),
            reads_total: self.reads_tokens(),
            peak_tokens: self.peak_tokens(),
            per_head_live: self.per_head_live.clone(),
            measured_cr: self.measured_cr().ok(),
        }
    }
}

/// Compression ratio `elapsed / live` for each head and in aggregate.
pub fn measured_cr(per_head_live: &[usize], elapsed: usize) -> Result<(Vec<f64>, f64), CacheError> {
    if elapsed == 0 {
        return Err(CacheError::Config("measured_cr needs at least one elapsed token".into()));
    }
    let total: usize = per_head_live.iter().sum();
    if total == 0 || per_head_live.contains(&0) {
        return Err(CacheError::NoLiveEntries);
    }
    let per = per_head_live.iter().map(|&l| elapsed as f64 / l as f64).collect();
    let agg = elapsed as f64 * per_head_live.len() as f64 / total as f64;
    Ok((per, agg))
}
