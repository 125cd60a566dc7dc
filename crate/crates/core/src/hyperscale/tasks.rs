//! Synthetic verifiable tasks and a scripted reasoner that solves them by
//! attending over a real KV cache.
//!
//! A prompt holds facts (address key, symbol value) mixed with distractor
//! tokens. A chain answers in passes: each hop queries the cache with the
//! address of the fact it needs and decodes the symbol from the attended
//! value under Gaussian read noise, with filler steps between hops. Every
//! generated step is appended to the cache too, so long dense chains
//! dilute their own retrieval. The chain's answer is the majority over its
//! completed passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::baselines::{PolicyBudget, PolicyKind};
use crate::kvcache::{DecodeEngine, ReadLedger};
use crate::numerics::Tensor;
use crate::rng::{normal, stream, RandomStream};

use super::{majority, BudgetConfig, ScaleError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Sum of three fact symbols modulo the alphabet size.
    ModChain,
    /// Single lookup with decoy facts whose addresses resemble the target.
    CopyDistractors,
    /// Single lookup among many distractors.
    Needle,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::ModChain, TaskKind::CopyDistractors, TaskKind::Needle];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ModChain => "mod-chain",
            TaskKind::CopyDistractors => "copy-distractors",
            TaskKind::Needle => "needle",
        }
    }

    fn hops(self) -> usize {
        match self {
            TaskKind::ModChain => 3,
            _ => 1,
        }
    }
}

/// Knobs of the toy suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSuite {
    pub tasks: Vec<TaskKind>,
    pub instances_per_task: usize,
    /// Key/value width of the single attention head.
    pub head_dim: usize,
    /// Symbols are one-hot in the first `symbols` value dimensions.
    pub symbols: usize,
    pub facts: usize,
    pub distractors: usize,
    /// Decoy facts per instance in the copy task.
    pub decoys: usize,
    /// Cosine between a decoy address and its target address.
    pub decoy_similarity: f64,
    /// Query gain on the fact address.
    pub query_gain: f64,
    /// Norm of distractor and generated-token keys.
    pub noise_key_norm: f64,
    /// Standard deviation of the symbol read noise.
    pub read_noise: f64,
    /// Probability that the scripted gate flags a fact for eviction.
    pub fact_gate_error: f64,
    /// Filler steps after every hop.
    pub filler_per_hop: usize,
    /// DMS grace window.
    pub window: usize,
    pub page_size: usize,
}

impl Default for TaskSuite {
    fn default() -> Self {
        Self {
            tasks: TaskKind::ALL.to_vec(),
            instances_per_task: 16,
            head_dim: 32,
            symbols: 16,
            facts: 8,
            distractors: 56,
            decoys: 3,
            decoy_similarity: 0.6,
            query_gain: 24.0,
            noise_key_norm: 1.0,
            read_noise: 0.25,
            fact_gate_error: 0.02,
            filler_per_hop: 7,
            window: 16,
            page_size: 16,
        }
    }
}

impl TaskSuite {
    pub fn validate(&self) -> Result<(), ScaleError> {
        let bad = |m: &str| Err(ScaleError::Config(m.to_string()));
        if self.tasks.is_empty() || self.instances_per_task == 0 {
            return bad("task suite needs at least one task and instance");
        }
        if self.symbols < 2 || self.symbols > self.head_dim {
            return bad("symbols must be in 2..=head_dim");
        }
        if self.facts < 3 {
            return bad("at least three facts are needed");
        }
        if self.window == 0 || self.page_size == 0 {
            return bad("window and page_size must be positive");
        }
        Ok(())
    }

    pub fn prompt_len(&self) -> usize {
        self.facts + self.distractors + self.decoys
    }

    /// Deterministic instance `index` of `kind`.
    pub fn instance(&self, kind: TaskKind, index: usize, seed: u64) -> TaskInstance {
        let mut rng = stream(seed, &format!("task/{}/{index}", kind.name()));
        let dh = self.head_dim;
        let mut tokens = Vec::new();
        let mut addresses = Vec::new();
        let mut symbols = Vec::new();
        for _ in 0..self.facts {
            let a = unit(&mut rng, dh);
            let s = rng.gen_range(0..self.symbols);
            addresses.push(a.clone());
            symbols.push(s);
            tokens.push(PromptToken {
                key: a,
                value: one_hot(dh, s),
                fact: true,
            });
        }
        let needed: Vec<usize> = match kind {
            TaskKind::ModChain => vec![0, 1, 2],
            _ => vec![0],
        };
        if kind == TaskKind::CopyDistractors {
            for _ in 0..self.decoys {
                let noise = unit(&mut rng, dh);
                let c = self.decoy_similarity;
                let mixed: Vec<f64> = addresses[0]
                    .iter()
                    .zip(&noise)
                    .map(|(a, n)| c * a + (1.0 - c * c).sqrt() * n)
                    .collect();
                let s = (symbols[0] + rng.gen_range(1..self.symbols)) % self.symbols;
                tokens.push(PromptToken {
                    key: normalise(mixed),
                    value: one_hot(dh, s),
                    fact: true,
                });
            }
        }
        for _ in 0..(self.prompt_len() - tokens.len()) {
            tokens.push(PromptToken {
                key: scaled(unit(&mut rng, dh), self.noise_key_norm),
                value: one_hot(dh, rng.gen_range(0..self.symbols)),
                fact: false,
            });
        }
        // Shuffle so facts sit anywhere in the prompt.
        for i in (1..tokens.len()).rev() {
            let j = rng.gen_range(0..=i);
            tokens.swap(i, j);
        }
        let answer = match kind {
            TaskKind::ModChain => (symbols[0] + symbols[1] + symbols[2]) % self.symbols,
            _ => symbols[0],
        };
        TaskInstance {
            kind,
            tokens,
            queries: needed.iter().map(|&f| addresses[f].clone()).collect(),
            answer,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PromptToken {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub fact: bool,
}

#[derive(Clone, Debug)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub tokens: Vec<PromptToken>,
    /// Address queried at each hop of a pass.
    pub queries: Vec<Vec<f64>>,
    pub answer: usize,
}

/// Result of one chain.
#[derive(Clone, Debug)]
pub struct ChainOutcome {
    pub answer: Option<usize>,
    pub passes: usize,
    pub ledger: ReadLedger,
    pub failed: Option<String>,
}

fn unit(rng: &mut RandomStream, dim: usize) -> Vec<f64> {
    normalise((0..dim).map(|_| normal(rng)).collect())
}

fn normalise(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn scaled(v: Vec<f64>, s: f64) -> Vec<f64> {
    v.into_iter().map(|x| x * s).collect()
}

fn one_hot(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

/// Eviction decision of the scripted gate: non-facts are flagged with
/// probability `1 - 1/CR`, facts with probability `fact_error` when
/// compressing at all.
fn gate(rng: &mut RandomStream, fact: bool, cr: f64, fact_error: f64) -> bool {
    let u = rng.gen::<f64>();
    if cr <= 1.0 {
        false
    } else if fact {
        u < fact_error
    } else {
        u < 1.0 - 1.0 / cr
    }
}

/// Runs chain `chain` of `instance` under `policy` at configuration `cfg`.
pub(crate) fn run_chain(
    suite: &TaskSuite,
    instance: &TaskInstance,
    policy: PolicyKind,
    cfg: &BudgetConfig,
    seed: u64,
    chain: usize,
) -> Result<ChainOutcome, ScaleError> {
    let dh = suite.head_dim;
    let att = AttentionConfig {
        d_model: dh,
        n_q_heads: 1,
        n_kv_heads: 1,
    };
    let p = instance.tokens.len();
    let budget = if policy.needs_budget() {
        Some(PolicyBudget::new(((cfg.l as f64) / cfg.cr).floor().max(1.0) as usize)?)
    } else {
        None
    };
    let page_size = policy.page_size(suite.page_size, cfg.cr);
    let mut engine = DecodeEngine::new(att, 1, page_size, policy.build(suite.window, budget, page_size)?)?;
    let label = format!("chain/{}/{chain}", instance.kind.name());
    let mut gate_rng = stream(seed, &format!("{label}/gate"));
    let mut rng = stream(seed, &format!("{label}/noise"));
    let cr = if policy.uses_decisions() { cfg.cr } else { 1.0 };

    let prompt_gate: Vec<bool> = instance
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| i > 0 && gate(&mut gate_rng, t.fact, cr, suite.fact_gate_error))
        .collect();
    let keys = Tensor::from_rows(&instance.tokens.iter().map(|t| t.key.clone()).collect::<Vec<_>>())?;
    let values = Tensor::from_rows(&instance.tokens.iter().map(|t| t.value.clone()).collect::<Vec<_>>())?;
    if p > cfg.l {
        return Err(ScaleError::Config(format!("prompt of {p} tokens exceeds L = {}", cfg.l)));
    }
    if engine.batched_prefill() {
        engine.prefill_layer(0, &keys, &keys, &values, &[prompt_gate])?;
        engine.end_prefill(p);
    } else {
        engine.set_prefill(true);
        for i in 0..p {
            engine.attend_layer(0, keys.row(i), keys.row(i), values.row(i), &[prompt_gate[i]])?;
            engine.end_step();
        }
        engine.set_prefill(false);
    }

    let hops = instance.kind.hops();
    let pass_len = hops * (1 + suite.filler_per_hop);
    let mut votes = Vec::new();
    let mut acc = 0usize;
    let mut failed = None;
    for step in 0..(cfg.l - p) {
        let slot = step % pass_len;
        let hop = (slot % (1 + suite.filler_per_hop) == 0).then_some(slot / (1 + suite.filler_per_hop));
        let q: Vec<f64> = match hop {
            Some(h) => scaled(instance.queries[h].clone(), suite.query_gain),
            None => unit(&mut rng, dh),
        };
        let key = scaled(unit(&mut rng, dh), suite.noise_key_norm);
        let mut value = vec![0.0; dh];
        value[rng.gen_range(0..suite.symbols)] = 1.0;
        let evict = gate(&mut gate_rng, false, cr, 0.0);
        let ctx = match engine.attend_layer(0, &q, &key, &value, &[evict]) {
            Ok(c) => c,
            Err(e) => {
                failed = Some(e.to_string());
                break;
            }
        };
        engine.end_step();
        if let Some(h) = hop {
            let read = (0..suite.symbols)
                .map(|s| ctx[s] + suite.read_noise * normal(&mut rng))
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(s, _)| s)
                .unwrap_or(0);
            acc = if h == 0 { read } else { acc + read };
            if h + 1 == hops {
                votes.push(acc % suite.symbols);
            }
        }
    }
    let answer = majority(&votes).ok();
    let (_, ledger) = engine.into_parts();
    Ok(ChainOutcome {
        answer,
        passes: votes.len(),
        ledger,
        failed,
    })
}
