//! Incremental attention over a [`PagedKVCache`] driven by a pluggable
//! eviction policy.

use crate::attention::{vec_mat, AttentionConfig, ProjectionSet};
use crate::numerics::{dot, Tensor};

use super::cache::PagedKVCache;
use super::ledger::ReadLedger;
use super::CacheError;

/// How a new token is stored in one head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Admission {
    /// New entry; it stops being visible at step `deadline`, if any.
    Append { deadline: Option<usize> },
    /// Merged into the head's most recent entry.
    Accumulate,
}

/// Attention weights of one query head at one step, keyed by position.
pub type HeadWeights = Vec<(usize, f64)>;

/// Eviction or retrieval behaviour injected into the engine.
pub trait CachePolicy {
    fn name(&self) -> &'static str;

    /// Whether a prompt may be processed in one masked pass. Policies that
    /// react to attention weights or mutate the cache on admission are fed
    /// the prompt token by token instead.
    fn batched_prefill(&self) -> bool {
        false
    }

    /// Decides how token `t` enters head `(layer, head)`; may also remove
    /// older entries. `decision` is the binary gate output for that head.
    fn admit(
        &mut self,
        cache: &mut PagedKVCache,
        layer: usize,
        head: usize,
        t: usize,
        decision: bool,
    ) -> Result<Admission, CacheError>;

    /// Pages of `(layer, kv_head)` that one query head reads; `None` reads
    /// every live entry.
    fn select_pages(
        &mut self,
        _cache: &PagedKVCache,
        _layer: usize,
        _kv_head: usize,
        _query: &[f64],
        _prefill: bool,
    ) -> Option<Vec<usize>> {
        None
    }

    fn wants_weights(&self) -> bool {
        false
    }

    /// Called once per layer after attention, with one weight list per
    /// query head. Only invoked when [`Self::wants_weights`] is true.
    fn observe(
        &mut self,
        _cache: &mut PagedKVCache,
        _cfg: &AttentionConfig,
        _layer: usize,
        _t: usize,
        _weights: &[HeadWeights],
    ) -> Result<(), CacheError> {
        Ok(())
    }

    /// Extra token-equivalents held beside the live entries, summed over stores.
    fn overhead(&self, _cache: &PagedKVCache) -> u64 {
        0
    }
}

/// Dense cache: nothing is ever evicted.
#[derive(Clone, Copy, Debug, Default)]
pub struct Vanilla;

impl CachePolicy for Vanilla {
    fn name(&self) -> &'static str {
        "vanilla"
    }

    fn batched_prefill(&self) -> bool {
        true
    }

    fn admit(&mut self, _: &mut PagedKVCache, _: usize, _: usize, _: usize, _: bool) -> Result<Admission, CacheError> {
        Ok(Admission::Append { deadline: None })
    }
}

/// Delayed eviction: a token flagged at step `t` stays visible through
/// step `t + w - 1` and is removed before step `t + w` attends.
#[derive(Clone, Copy, Debug)]
pub struct DelayedEviction {
    pub window: usize,
}

impl CachePolicy for DelayedEviction {
    fn name(&self) -> &'static str {
        "dms"
    }

    fn batched_prefill(&self) -> bool {
        true
    }

    fn admit(&mut self, _: &mut PagedKVCache, _: usize, _: usize, t: usize, decision: bool) -> Result<Admission, CacheError> {
        Ok(Admission::Append {
            deadline: decision.then_some(t + self.window),
        })
    }
}

/// Output of a single-layer decode step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Attention output after `W_o`.
    pub output: Vec<f64>,
    /// Entries attended in this step, summed over KV heads.
    pub reads: u64,
}

pub struct DecodeEngine {
    cfg: AttentionConfig,
    cache: PagedKVCache,
    ledger: ReadLedger,
    policy: Box<dyn CachePolicy>,
    t: usize,
    step_reads: u64,
    prefill: bool,
    prefill_live: Option<Vec<u64>>,
}

impl DecodeEngine {
    pub fn new(
        cfg: AttentionConfig,
        n_layers: usize,
        page_size: usize,
        policy: Box<dyn CachePolicy>,
    ) -> Result<Self, CacheError> {
        cfg.validate().map_err(|e| CacheError::Config(e.to_string()))?;
        let cache = PagedKVCache::new(n_layers, cfg.n_kv_heads, cfg.head_dim(), page_size)?;
        let ledger = ReadLedger::new(cache.n_stores());
        Ok(Self {
            cfg,
            cache,
            ledger,
            policy,
            t: 0,
            step_reads: 0,
            prefill: false,
            prefill_live: None,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &PagedKVCache {
        &self.cache
    }

    pub fn ledger(&self) -> &ReadLedger {
        &self.ledger
    }

    pub fn into_parts(self) -> (PagedKVCache, ReadLedger) {
        (self.cache, self.ledger)
    }

    pub fn policy_name(&self) -> &'static str {
        self.policy.name()
    }

    pub fn batched_prefill(&self) -> bool {
        self.policy.batched_prefill()
    }

    /// Position of the next token.
    pub fn position(&self) -> usize {
        self.t
    }

    /// Marks the following steps as prompt processing (reads are booked
    /// separately) or as decoding.
    pub fn set_prefill(&mut self, on: bool) {
        self.prefill = on;
    }

    /// Admits token `t`'s keys/values into every KV head of `layer`, applies
    /// pending evictions, then attends. Returns the concatenated per-head
    /// context (before `W_o`).
    pub fn attend_layer(
        &mut self,
        layer: usize,
        q: &[f64],
        k: &[f64],
        v: &[f64],
        decisions: &[bool],
    ) -> Result<Vec<f64>, CacheError> {
        let cfg = self.cfg;
        let (dh, h_kv) = (cfg.head_dim(), cfg.n_kv_heads);
        if q.len() != cfg.d_model || k.len() != cfg.kv_dim() || v.len() != cfg.kv_dim() {
            return Err(CacheError::Dim {
                expected: cfg.d_model,
                key: k.len(),
                value: v.len(),
            });
        }
        if decisions.len() != h_kv {
            return Err(CacheError::Decisions {
                expected: h_kv,
                found: decisions.len(),
            });
        }
        let t = self.t;
        for g in 0..h_kv {
            let key = k[g * dh..(g + 1) * dh].to_vec();
            let val = v[g * dh..(g + 1) * dh].to_vec();
            match self.policy.admit(&mut self.cache, layer, g, t, decisions[g])? {
                Admission::Append { deadline } => {
                    self.cache.append(layer, g, key, val, t, deadline)?;
                }
                Admission::Accumulate => self.cache.accumulate(layer, g, &key, &val)?,
            }
            self.cache.evict_due(layer, g, t)?;
        }

        let want = self.policy.wants_weights();
        let mut weights: Vec<HeadWeights> = Vec::new();
        let mut context = vec![0.0; cfg.d_model];
        let scale = cfg.scale();
        for g in 0..h_kv {
            let mut union: Option<Vec<usize>> = None;
            for qh in (g * cfg.group_size())..((g + 1) * cfg.group_size()) {
                let qs = &q[qh * dh..(qh + 1) * dh];
                let pages = self.policy.select_pages(&self.cache, layer, g, qs, self.prefill);
                let entries: Vec<_> = match &pages {
                    None => self.cache.entries(layer, g).collect(),
                    Some(ps) => ps.iter().flat_map(|&p| self.cache.page_entries(layer, g, p)).collect(),
                };
                if entries.is_empty() {
                    return Err(CacheError::EmptyHead { layer, head: g });
                }
                let scores: Vec<f64> = entries.iter().map(|e| dot(qs, &e.key) * scale).collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                let out = &mut context[qh * dh..(qh + 1) * dh];
                for (e, x) in entries.iter().zip(&exps) {
                    let a = x / z;
                    for (o, vv) in out.iter_mut().zip(&e.value) {
                        *o += a * vv;
                    }
                }
                if want {
                    weights.push(entries.iter().zip(&exps).map(|(e, x)| (e.position, x / z)).collect());
                }
                if let Some(ps) = pages {
                    let u = union.get_or_insert_with(Vec::new);
                    u.extend(ps);
                }
            }
            self.step_reads += match union {
                None => self.cache.live(layer, g) as u64,
                Some(mut u) => {
                    u.sort_unstable();
                    u.dedup();
                    u.iter().map(|&p| self.cache.page_entries(layer, g, p).count() as u64).sum()
                }
            };
        }
        if want {
            self.policy.observe(&mut self.cache, &cfg, layer, t, &weights)?;
        }
        Ok(context)
    }

    /// Closes the current token step after every layer has attended.
    pub fn end_step(&mut self) {
        let resident = self.cache.live_total() as u64 + self.policy.overhead(&self.cache);
        let reads = std::mem::take(&mut self.step_reads);
        if self.prefill {
            self.ledger.record_prefill(1, reads, resident, self.cache.live_per_head());
        } else {
            self.ledger.record_step(reads, resident, self.cache.live_per_head());
        }
        self.t += 1;
    }

    /// One-shot masked prompt pass for one layer. `decisions[g][i]` is the
    /// gate output of KV head `g` at prompt position `i`. Only entries still
    /// visible after the prompt are stored. Every layer must be passed the
    /// same prompt length before [`Self::end_prefill`].
    pub fn prefill_layer(
        &mut self,
        layer: usize,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        decisions: &[Vec<bool>],
    ) -> Result<Tensor, CacheError> {
        if !self.policy.batched_prefill() {
            return Err(CacheError::Config(format!(
                "policy {} does not support one-shot prefill",
                self.policy.name()
            )));
        }
        if self.t != 0 {
            return Err(CacheError::Config("prefill requires an empty cache".into()));
        }
        let cfg = self.cfg;
        let (dh, h_kv) = (cfg.head_dim(), cfg.n_kv_heads);
        let p = q.rows();
        if decisions.len() != h_kv || decisions.iter().any(|d| d.len() != p) {
            return Err(CacheError::Decisions {
                expected: h_kv,
                found: decisions.len(),
            });
        }
        let mut out = Tensor::zeros(&[p, cfg.d_model]);
        let scale = cfg.scale();
        for g in 0..h_kv {
            let mut deadlines = Vec::with_capacity(p);
            for (j, &dec) in decisions[g].iter().enumerate() {
                deadlines.push(match self.policy.admit(&mut self.cache, layer, g, j, dec)? {
                    Admission::Append { deadline } => deadline,
                    Admission::Accumulate => {
                        return Err(CacheError::Config("accumulating policies cannot prefill in one pass".into()))
                    }
                });
            }
            let visible = |i: usize, j: usize| j <= i && deadlines[j].is_none_or(|d| d > i);
            for i in 0..p {
                self.step_reads += (0..=i).filter(|&j| visible(i, j)).count() as u64;
            }
            for qh in (g * cfg.group_size())..((g + 1) * cfg.group_size()) {
                for i in 0..p {
                    let qs = &q.row(i)[qh * dh..(qh + 1) * dh];
                    let keys: Vec<usize> = (0..=i).filter(|&j| visible(i, j)).collect();
                    let scores: Vec<f64> =
                        keys.iter().map(|&j| dot(qs, &k.row(j)[g * dh..(g + 1) * dh]) * scale).collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    let o = &mut out.row_mut(i)[qh * dh..(qh + 1) * dh];
                    for (&j, x) in keys.iter().zip(&exps) {
                        let a = x / z;
                        for (oo, vv) in o.iter_mut().zip(&v.row(j)[g * dh..(g + 1) * dh]) {
                            *oo += a * vv;
                        }
                    }
                }
            }
            self.pending_peak_add(&deadlines, p);
            for j in 0..p {
                if deadlines[j].is_none_or(|d| d > p) {
                    self.cache.append(
                        layer,
                        g,
                        k.row(j)[g * dh..(g + 1) * dh].to_vec(),
                        v.row(j)[g * dh..(g + 1) * dh].to_vec(),
                        j,
                        deadlines[j],
                    )?;
                }
            }
        }
        Ok(out)
    }

    fn pending_peak_add(&mut self, deadlines: &[Option<usize>], p: usize) {
        let c = self.prefill_live.get_or_insert_with(|| vec![0; p]);
        for (i, slot) in c.iter_mut().enumerate() {
            *slot += (0..=i).filter(|&j| deadlines[j].is_none_or(|d| d > i)).count() as u64;
        }
    }

    /// Finishes a one-shot prefill of `p` tokens.
    pub fn end_prefill(&mut self, p: usize) {
        let live_curve = self.prefill_live.take().unwrap_or_default();
        let resident = live_curve.iter().copied().max().unwrap_or(0);
        let reads = std::mem::take(&mut self.step_reads);
        self.ledger.record_prefill(p, reads, resident, self.cache.live_per_head());
        self.t = p;
    }

    /// Single-layer decode: project `h_t`, attend through the cache and
    /// apply `W_o`.
    pub fn decode_step(&mut self, h: &[f64], proj: &ProjectionSet, decisions: &[bool]) -> Result<StepOutput, CacheError> {
        let (q, k, v) = proj.project_token(h);
        let before = self.step_reads;
        let ctx = self.attend_layer(0, &q, &k, &v, decisions)?;
        let reads = self.step_reads - before;
        self.end_step();
        Ok(StepOutput {
            output: vec_mat(&ctx, &proj.wo),
            reads,
        })
    }

    /// Single-layer prompt pass. `decisions[g][i]` per KV head and position.
    /// Uses the one-shot path when the policy allows it, token steps otherwise.
    pub fn prefill(&mut self, h: &Tensor, proj: &ProjectionSet, decisions: &[Vec<bool>]) -> Result<Tensor, CacheError> {
        let p = h.rows();
        if p == 0 {
            return Ok(Tensor::zeros(&[0, self.cfg.d_model]));
        }
        if self.policy.batched_prefill() {
            let q = crate::numerics::matmul(h, &proj.wq).map_err(CacheError::from)?;
            let k = crate::numerics::matmul(h, &proj.wk).map_err(CacheError::from)?;
            let v = crate::numerics::matmul(h, &proj.wv).map_err(CacheError::from)?;
            let ctx = self.prefill_layer(0, &q, &k, &v, decisions)?;
            self.end_prefill(p);
            Ok(crate::numerics::matmul(&ctx, &proj.wo)?)
        } else {
            self.set_prefill(true);
            let mut out = Vec::with_capacity(p);
            for i in 0..p {
                let d: Vec<bool> = decisions.iter().map(|row| row[i]).collect();
                out.push(self.decode_step(h.row(i), proj, &d)?.output);
            }
            self.set_prefill(false);
            Ok(Tensor::from_rows(&out)?)
        }
    }
}
