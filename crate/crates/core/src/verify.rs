//! Reference checks against independent brute-force oracles: masked
//! one-shot attention vs paged decode, model gradients vs central finite
//! differences, and the baseline policies vs direct recomputation.

use std::collections::BTreeSet;

use rand::Rng;

use crate::attention::{attend, AttentionConfig, ProjectionSet};
use crate::baselines::{ImmediateEviction, PageMeta, PolicyBudget, PolicyKind};
use crate::kvcache::{CachePolicy, DecodeEngine, DelayedEviction};
use crate::numerics::{dot, softmax_rows, Tape, Tensor, Var};
use crate::rng::{normal, stream, RandomStream};
use crate::train::{aux_loss_on_tape, EvictionTiming, ForwardOptions, GateMode, GateUse, MaskSpec, ModelConfig, ToyModel, LOG_PROB_FLOOR};

fn gaussian(rng: &mut RandomStream, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| normal(rng)).collect()).expect("shape")
}

/// Largest deviation seen over a batch of cases.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EquivalenceReport {
    pub cases: usize,
    pub max_abs_diff: f64,
}

impl EquivalenceReport {
    fn absorb(&mut self, diff: f64) {
        self.cases += 1;
        self.max_abs_diff = self.max_abs_diff.max(diff);
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            cases: self.cases + other.cases,
            max_abs_diff: self.max_abs_diff.max(other.max_abs_diff),
        }
    }
}

/// Max abs difference between masked one-shot attention and token-by-token
/// paged decode for `decisions[kv_head][t]`. With `prefill` tokens fed
/// through the engine's prompt path first.
pub fn mask_decode_case(
    decisions: &[Vec<bool>],
    window: usize,
    timing: EvictionTiming,
    prefill: usize,
    rng: &mut RandomStream,
) -> f64 {
    let h_kv = decisions.len();
    let t = decisions[0].len();
    let cfg = AttentionConfig::new(8 * h_kv, 2 * h_kv, h_kv).expect("config");
    let proj = ProjectionSet::random(&cfg, rng);
    let h = gaussian(rng, t, cfg.d_model);
    let spec = MaskSpec::from_bools(decisions, window, timing).expect("mask");
    let dense = attend(&h, &proj, &cfg, Some(&spec)).expect("attend");
    let policy: Box<dyn CachePolicy> = match timing {
        EvictionTiming::Delayed => Box::new(DelayedEviction { window }),
        EvictionTiming::Immediate => Box::new(ImmediateEviction { window }),
    };
    let mut engine = DecodeEngine::new(cfg, 1, 4, policy).expect("engine");
    let mut diff: f64 = 0.0;
    let p = prefill.min(t);
    if p > 0 {
        let rows: Vec<Vec<f64>> = (0..p).map(|i| h.row(i).to_vec()).collect();
        let head: Vec<Vec<bool>> = decisions.iter().map(|d| d[..p].to_vec()).collect();
        let out = engine.prefill(&Tensor::from_rows(&rows).expect("rows"), &proj, &head).expect("prefill");
        for i in 0..p {
            for (a, b) in out.row(i).iter().zip(dense.row(i)) {
                diff = diff.max((a - b).abs());
            }
        }
    }
    for i in p..t {
        let d: Vec<bool> = decisions.iter().map(|row| row[i]).collect();
        let out = engine.decode_step(h.row(i), &proj, &d).expect("decode");
        for (a, b) in out.output.iter().zip(dense.row(i)) {
            diff = diff.max((a - b).abs());
        }
    }
    diff
}

/// Every 1-head decision stream of length `1..=exhaustive_max_t`, then
/// `random_per_t` random 2-head streams for each length up to `max_t`,
/// at every window in `windows`.
pub fn mask_decode_sweep(
    exhaustive_max_t: usize,
    max_t: usize,
    random_per_t: usize,
    windows: &[usize],
    seed: u64,
) -> EquivalenceReport {
    let mut rep = EquivalenceReport::default();
    let mut rng = stream(seed, "verify/mask-sweep");
    for &w in windows {
        for t in 1..=exhaustive_max_t {
            for bits in 0u64..(1 << t) {
                let d: Vec<bool> = (0..t).map(|i| bits >> i & 1 == 1).collect();
                rep.absorb(mask_decode_case(&[d], w, EvictionTiming::Delayed, 0, &mut rng));
            }
        }
        for t in (exhaustive_max_t + 1)..=max_t {
            for c in 0..random_per_t {
                let d: Vec<Vec<bool>> = (0..2).map(|_| (0..t).map(|_| rng.gen::<bool>()).collect()).collect();
                let prefill = if c % 2 == 0 { 0 } else { rng.gen_range(0..=t) };
                rep.absorb(mask_decode_case(&d, w, EvictionTiming::Delayed, prefill, &mut rng));
            }
        }
    }
    rep
}

/// `cases` random 2-head streams of length `t` with eviction rate drawn
/// per case.
pub fn mask_decode_random(t: usize, window: usize, cases: usize, timing: EvictionTiming, seed: u64) -> EquivalenceReport {
    let mut rep = EquivalenceReport::default();
    let mut rng = stream(seed, "verify/mask-random");
    for c in 0..cases {
        let rate: f64 = rng.gen();
        let d: Vec<Vec<bool>> = (0..2).map(|_| (0..t).map(|_| rng.gen::<f64>() < rate).collect()).collect();
        let prefill = if c % 2 == 0 { 0 } else { rng.gen_range(0..=t) };
        rep.absorb(mask_decode_case(&d, window, timing, prefill, &mut rng));
    }
    rep
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientReport {
    pub coordinates: usize,
    pub tensors: usize,
    pub max_rel_err: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: String,
}

/// Small model whose gate logits sit in the sigmoid's responsive range.
fn gradient_fixture(mode: GateMode, seed: u64) -> (ToyModel, Vec<usize>, Vec<Tensor>, Tensor) {
    let cfg = ModelConfig {
        vocab: 16,
        d_model: 16,
        n_layers: 2,
        n_q_heads: 4,
        n_kv_heads: 2,
        d_ff: 24,
        max_seq: 10,
    };
    let mut rng = stream(seed, "verify/grad");
    let mut m = ToyModel::new(cfg, mode, &mut rng).expect("model");
    m.gate_bias = 0.0;
    let n = m.params().len();
    for i in 0..n {
        if m.is_gate_param(i) {
            for x in m.params_mut()[i].data_mut() {
                *x = 0.01 * normal(&mut rng);
            }
        }
    }
    if mode == GateMode::Neuron {
        // Shrink the borrowed query columns so their logits stay moderate.
        for l in 0..cfg.n_layers {
            let idx = m.names().iter().position(|n| *n == format!("layers.{l}.wq")).expect("wq");
            let wq = &mut m.params_mut()[idx];
            let cols = wq.cols();
            for (i, x) in wq.data_mut().iter_mut().enumerate() {
                if (i % cols) % (cols / cfg.n_kv_heads) == 0 {
                    *x *= 0.02;
                }
            }
        }
    }
    let t = 8;
    let tokens: Vec<usize> = (0..t).map(|_| rng.gen_range(0..cfg.vocab)).collect();
    let noise: Vec<Tensor> = (0..cfg.n_layers)
        .map(|_| {
            let data = (0..t * cfg.n_kv_heads)
                .map(|_| (crate::train::logistic_noise(&mut rng)).clamp(-0.3, 0.3))
                .collect();
            Tensor::new(vec![t, cfg.n_kv_heads], data).expect("noise")
        })
        .collect();
    let teacher = softmax_rows(&gaussian(&mut rng, t, cfg.vocab)).expect("teacher");
    (m, tokens, noise, teacher)
}

fn gradient_loss(m: &ToyModel, tokens: &[usize], noise: &[Tensor], teacher: &Tensor, tape: &mut Tape) -> (Var, Vec<Var>) {
    let vars = m.bind(tape);
    let opts = ForwardOptions::with_gate(GateUse::Sampled {
        noise: noise.to_vec(),
        window: 2,
        timing: EvictionTiming::Delayed,
    });
    let out = m.forward(tape, &vars, tokens, &opts).expect("forward");
    let kl = tape.kl_div(out.logits, teacher, LOG_PROB_FLOOR).expect("kl");
    let aux = aux_loss_on_tape(tape, &out.alphas, 0.9);
    let aux = tape.scale(aux, 0.05);
    (tape.add(kl, aux).expect("scalars"), vars)
}

/// Distillation plus compression-hinge loss of a small model with frozen
/// gate noise; compares the tape gradient with central differences at
/// `per_tensor` random coordinates of every parameter tensor.
pub fn model_gradient_check(mode: GateMode, per_tensor: usize, seed: u64) -> GradientReport {
    let (mut m, tokens, noise, teacher) = gradient_fixture(mode, seed);
    let mut tape = Tape::new();
    let (root, vars) = gradient_loss(&m, &tokens, &noise, &teacher, &mut tape);
    let grads = tape.backward(root).expect("backward");
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let mut rng = stream(seed, "verify/grad-coords");
    let mut rep = GradientReport::default();
    let h = 1e-5;
    let eval = |m: &ToyModel| {
        let mut tape = Tape::new();
        let (r, _) = gradient_loss(m, &tokens, &noise, &teacher, &mut tape);
        tape.value(r).item()
    };
    for i in 0..m.params().len() {
        if mode == GateMode::Neuron && m.is_gate_param(i) {
            continue;
        }
        rep.tensors += 1;
        let n = m.params()[i].numel();
        for _ in 0..per_tensor {
            let j = rng.gen_range(0..n);
            let orig = m.params()[i].data()[j];
            m.params_mut()[i].data_mut()[j] = orig + h;
            let up = eval(&m);
            m.params_mut()[i].data_mut()[j] = orig - h;
            let down = eval(&m);
            m.params_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            rep.coordinates += 1;
            if rel > rep.max_rel_err {
                rep.max_rel_err = rel;
                rep.worst = format!("{}[{j}] analytic {a:e} numeric {numeric:e}", m.names()[i]);
            }
        }
    }
    rep
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OracleReport {
    pub streams: usize,
    pub evictions: usize,
    pub mismatches: usize,
    pub budget_violations: usize,
}

struct Stream {
    cfg: AttentionConfig,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    budget: usize,
}

fn random_stream(rng: &mut RandomStream) -> Stream {
    let h_kv = rng.gen_range(1..=2);
    let cfg = AttentionConfig::new(4 * 2 * h_kv, 2 * h_kv, h_kv).expect("config");
    let t = rng.gen_range(8..48);
    let budget = rng.gen_range(2..12);
    let mut row = |n: usize| (0..t).map(|_| (0..n).map(|_| normal(rng)).collect()).collect::<Vec<Vec<f64>>>();
    Stream {
        q: row(cfg.d_model),
        k: row(cfg.kv_dim()),
        v: row(cfg.kv_dim()),
        cfg,
        budget,
    }
}

/// Direct softmax of every query head over the live positions, summed per
/// position in query-head order.
fn brute_weights(s: &Stream, t: usize, live: &BTreeSet<usize>) -> Vec<(usize, f64)> {
    let cfg = s.cfg;
    let dh = cfg.head_dim();
    let mut acc = vec![0.0; live.len()];
    for qh in 0..cfg.n_q_heads {
        let g = cfg.kv_head_of(qh);
        let q = &s.q[t][qh * dh..(qh + 1) * dh];
        let scores: Vec<f64> = live.iter().map(|&p| dot(q, &s.k[p][g * dh..(g + 1) * dh]) * cfg.scale()).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, x) in acc.iter_mut().zip(&e) {
            *a += x / z;
        }
    }
    live.iter().copied().zip(acc).collect()
}

fn argmin_lowest(scores: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut all: Vec<(usize, f64)> = scores.collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.first().map(|x| x.0)
}

fn run_oracle(kind: PolicyKind, streams: usize, seed: u64) -> OracleReport {
    let mut rng = stream(seed, &format!("verify/{}", kind.name()));
    let mut rep = OracleReport {
        streams,
        ..OracleReport::default()
    };
    for _ in 0..streams {
        let s = random_stream(&mut rng);
        let budget = PolicyBudget::new(s.budget).expect("budget");
        let policy = kind.build(1, Some(budget), 16).expect("policy");
        let mut engine = DecodeEngine::new(s.cfg, 1, 4, policy).expect("engine");
        let mut live: BTreeSet<usize> = BTreeSet::new();
        let mut history: Vec<Vec<(usize, f64)>> = Vec::new();
        for t in 0..s.q.len() {
            live.insert(t);
            let w = brute_weights(&s, t, &live);
            history.push(w.clone());
            let victim = if live.len() > s.budget {
                match kind {
                    PolicyKind::Tova => argmin_lowest(w.into_iter()),
                    _ => {
                        let recent = budget.split().0;
                        let protected: BTreeSet<usize> = live.iter().rev().take(recent).copied().collect();
                        argmin_lowest(live.iter().filter(|p| !protected.contains(p)).map(|&p| {
                            let mut c = 0.0;
                            for step in &history {
                                if let Some(&(_, x)) = step.iter().find(|e| e.0 == p) {
                                    c += x;
                                }
                            }
                            (p, c)
                        }))
                    }
                }
            } else {
                None
            };
            if let Some(p) = victim {
                live.remove(&p);
                rep.evictions += 1;
            }
            let d = vec![false; s.cfg.n_kv_heads];
            engine.attend_layer(0, &s.q[t], &s.k[t], &s.v[t], &d).expect("attend");
            engine.end_step();
            for g in 0..s.cfg.n_kv_heads {
                let got: BTreeSet<usize> = engine.cache().positions(0, g).into_iter().collect();
                if got != live {
                    rep.mismatches += 1;
                }
                if got.len() > s.budget {
                    rep.budget_violations += 1;
                }
            }
            if rep.mismatches > 0 {
                // Resynchronise so one divergence is counted once.
                live = engine.cache().positions(0, 0).into_iter().collect();
            }
        }
    }
    rep
}

/// TOVA against direct recomputation on random streams.
pub fn tova_oracle(streams: usize, seed: u64) -> OracleReport {
    run_oracle(PolicyKind::Tova, streams, seed)
}

/// H2O against cumulative scores recomputed from the full weight history.
pub fn h2o_oracle(streams: usize, seed: u64) -> OracleReport {
    run_oracle(PolicyKind::H2o, streams, seed)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SoundnessReport {
    pub checks: usize,
    pub violations: usize,
}

/// Quest page bound against the exact max inner product: every 4-token page
/// over the grid `{-1, 0, 1}²` with every grid query, then random pages.
pub fn quest_soundness(random_pages: usize, seed: u64) -> SoundnessReport {
    let grid: Vec<[f64; 2]> = (0..9).map(|i| [(i / 3) as f64 - 1.0, (i % 3) as f64 - 1.0]).collect();
    let mut rep = SoundnessReport::default();
    let mut check = |q: &[f64], keys: &[&[f64]]| {
        let meta = PageMeta::from_keys(q.len(), keys.iter().copied());
        let exact = keys.iter().map(|k| dot(q, k)).fold(f64::NEG_INFINITY, f64::max);
        rep.checks += 1;
        if meta.score(q) < exact {
            rep.violations += 1;
        }
    };
    for a in 0..9 {
        for b in 0..9 {
            for c in 0..9 {
                for d in 0..9 {
                    let keys = [&grid[a][..], &grid[b][..], &grid[c][..], &grid[d][..]];
                    for q in &grid {
                        check(q, &keys);
                    }
                }
            }
        }
    }
    let mut rng = stream(seed, "verify/quest");
    for _ in 0..random_pages {
        let dim = rng.gen_range(1..12);
        let keys: Vec<Vec<f64>> = (0..4).map(|_| (0..dim).map(|_| normal(&mut rng) * 3.0).collect()).collect();
        let q: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        let refs: Vec<&[f64]> = keys.iter().map(Vec::as_slice).collect();
        check(&q, &refs);
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sweeps_agree() {
        let r = mask_decode_sweep(4, 6, 3, &[1, 2], 1);
        assert!(r.max_abs_diff <= 1e-12, "{r:?}");
        assert_eq!(r.cases, 2 * (30 + 2 * 3));
    }

    #[test]
    fn oracles_agree_on_a_few_streams() {
        assert_eq!(tova_oracle(10, 1).mismatches, 0);
        assert_eq!(h2o_oracle(10, 1).mismatches, 0);
        assert_eq!(quest_soundness(10, 1).violations, 0);
    }
}
