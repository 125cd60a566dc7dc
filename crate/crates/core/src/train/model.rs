//! The toy decoder-only transformer: learned token and absolute position
//! embeddings, pre-norm (RMS) blocks of grouped-query attention and a GELU
//! MLP, untied output head.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, ProjectionSet};
use crate::numerics::{gelu, EvictionMaskSpec, MaskMode, NumericsError, Tape, Tensor, Var};
use crate::rng::{normal, RandomStream};

use super::gate::{binarize, GateMode, GateParams, DEFAULT_GATE_BIAS, DEFAULT_TAU};
use super::mask::{source_offset, EvictionTiming};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            d_model: 64,
            n_layers: 2,
            n_q_heads: 4,
            n_kv_heads: 2,
            d_ff: 256,
            max_seq: 256,
        }
    }
}

impl ModelConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_q_heads: self.n_q_heads,
            n_kv_heads: self.n_kv_heads,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.vocab == 0 || self.n_layers == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return Err("model dimensions must be positive".into());
        }
        self.attention().validate().map_err(|e| e.to_string())
    }
}

const NORM_EPS: f64 = 1e-6;
const PER_LAYER: usize = 11;
const GLOBALS: usize = 4;

/// Index of a tensor inside [`ToyModel::params`].
#[derive(Clone, Copy, Debug)]
pub(crate) enum Slot {
    TokEmb,
    PosEmb,
    FinalNorm,
    Unembed,
    AttnNorm(usize),
    Wq(usize),
    Wk(usize),
    Wv(usize),
    Wo(usize),
    MlpNorm(usize),
    WUp(usize),
    BUp(usize),
    WDown(usize),
    BDown(usize),
    Gate(usize),
}

impl Slot {
    pub(crate) fn index(self) -> usize {
        let layer = |l: usize, k: usize| GLOBALS + l * PER_LAYER + k;
        match self {
            Slot::TokEmb => 0,
            Slot::PosEmb => 1,
            Slot::FinalNorm => 2,
            Slot::Unembed => 3,
            Slot::AttnNorm(l) => layer(l, 0),
            Slot::Wq(l) => layer(l, 1),
            Slot::Wk(l) => layer(l, 2),
            Slot::Wv(l) => layer(l, 3),
            Slot::Wo(l) => layer(l, 4),
            Slot::MlpNorm(l) => layer(l, 5),
            Slot::WUp(l) => layer(l, 6),
            Slot::BUp(l) => layer(l, 7),
            Slot::WDown(l) => layer(l, 8),
            Slot::BDown(l) => layer(l, 9),
            Slot::Gate(l) => layer(l, 10),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub cfg: ModelConfig,
    pub gate_mode: GateMode,
    pub gate_bias: f64,
    pub tau: f64,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// How eviction decisions enter a forward pass.
#[derive(Clone, Debug)]
pub enum GateUse {
    /// Dense causal attention; gates are not evaluated.
    Off,
    /// Relaxed Gumbel-sigmoid decisions with frozen logistic noise, one
    /// `T×H` tensor per layer.
    Sampled {
        noise: Vec<Tensor>,
        window: usize,
        timing: EvictionTiming,
    },
    /// Rounded `sigmoid(logit)`; the mask is exact (`-inf` for evicted keys).
    Binary { window: usize, timing: EvictionTiming },
    /// Externally supplied binary decisions, one `T×H` tensor per layer.
    Fixed {
        decisions: Vec<Tensor>,
        window: usize,
        timing: EvictionTiming,
    },
}

/// Extra knobs for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub gate: GateUse,
    /// Neuron mode multiplier on the borrowed query column of each group.
    /// `None` zeroes it whenever gates are evaluated and leaves it alone
    /// for dense passes. Ignored in vector mode.
    pub neuron_scale: Option<f64>,
}

impl ForwardOptions {
    pub fn dense() -> Self {
        Self {
            gate: GateUse::Off,
            neuron_scale: None,
        }
    }

    pub fn with_gate(gate: GateUse) -> Self {
        Self {
            gate,
            neuron_scale: None,
        }
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Decision tensors (`T×H`) per layer; empty when gates are off.
    pub alphas: Vec<Var>,
    /// Pre-sigmoid gate logits per layer.
    pub gate_logits: Vec<Var>,
}

impl ToyModel {
    pub fn new(cfg: ModelConfig, gate_mode: GateMode, rng: &mut RandomStream) -> Result<Self, String> {
        cfg.validate()?;
        let d = cfg.d_model;
        let att = cfg.attention();
        let mut draw = |rows: usize, cols: usize, std: f64| {
            let data = (0..rows * cols).map(|_| normal(rng) * std).collect();
            Tensor::new(vec![rows, cols], data).expect("param shape")
        };
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut push = |name: String, t: Tensor| {
            names.push(name);
            params.push(t);
        };
        push("tok_emb".into(), draw(cfg.vocab, d, 1.0));
        push("pos_emb".into(), draw(cfg.max_seq, d, 0.2));
        push("final_norm".into(), Tensor::ones(&[d]));
        push("unembed".into(), draw(d, cfg.vocab, 1.0 / (d as f64).sqrt()));
        for l in 0..cfg.n_layers {
            let s = 1.0 / (d as f64).sqrt();
            push(format!("layers.{l}.attn_norm"), Tensor::ones(&[d]));
            push(format!("layers.{l}.wq"), draw(d, d, s));
            push(format!("layers.{l}.wk"), draw(d, att.kv_dim(), s));
            push(format!("layers.{l}.wv"), draw(d, att.kv_dim(), s));
            push(format!("layers.{l}.wo"), draw(d, d, s * 0.5));
            push(format!("layers.{l}.mlp_norm"), Tensor::ones(&[d]));
            push(format!("layers.{l}.w_up"), draw(d, cfg.d_ff, s));
            push(format!("layers.{l}.b_up"), Tensor::zeros(&[cfg.d_ff]));
            push(format!("layers.{l}.w_down"), draw(cfg.d_ff, d, 0.5 / (cfg.d_ff as f64).sqrt()));
            push(format!("layers.{l}.b_down"), Tensor::zeros(&[d]));
            push(format!("layers.{l}.gate"), Tensor::zeros(&[cfg.n_kv_heads, d]));
        }
        Ok(Self {
            cfg,
            gate_mode,
            gate_bias: DEFAULT_GATE_BIAS,
            tau: DEFAULT_TAU,
            names,
            params,
        })
    }

    /// Rebuilds a model from named tensors in canonical order.
    pub fn from_parts(
        cfg: ModelConfig,
        gate_mode: GateMode,
        gate_bias: f64,
        tau: f64,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self, String> {
        cfg.validate()?;
        let reference = Self::new(cfg, gate_mode, &mut crate::rng::stream(0, "layout"))?;
        if named.len() != reference.params.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                reference.params.len(),
                named.len()
            ));
        }
        for ((name, t), (rname, rt)) in named.iter().zip(reference.names.iter().zip(&reference.params)) {
            if name != rname || t.shape() != rt.shape() {
                return Err(format!(
                    "tensor {name} {:?} does not match expected {rname} {:?}",
                    t.shape(),
                    rt.shape()
                ));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self {
            cfg,
            gate_mode,
            gate_bias,
            tau,
            names,
            params,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub(crate) fn slot(&self, s: Slot) -> &Tensor {
        &self.params[s.index()]
    }

    pub fn is_gate_param(&self, index: usize) -> bool {
        index >= GLOBALS && (index - GLOBALS) % PER_LAYER == 10
    }

    pub fn projections(&self, layer: usize) -> ProjectionSet {
        ProjectionSet {
            wq: self.slot(Slot::Wq(layer)).clone(),
            wk: self.slot(Slot::Wk(layer)).clone(),
            wv: self.slot(Slot::Wv(layer)).clone(),
            wo: self.slot(Slot::Wo(layer)).clone(),
        }
    }

    pub fn gate_params(&self) -> GateParams {
        GateParams {
            mode: self.gate_mode,
            weights: (0..self.cfg.n_layers).map(|l| self.slot(Slot::Gate(l)).clone()).collect(),
            bias: self.gate_bias,
            tau: self.tau,
        }
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Teacher-style dense logits without keeping gradients around.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor, NumericsError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let out = self.forward(&mut tape, &vars, tokens, &ForwardOptions::dense())?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        tokens: &[usize],
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput, NumericsError> {
        let t = tokens.len();
        if t == 0 || t > self.cfg.max_seq {
            return Err(NumericsError::Invalid(format!(
                "sequence length {t} outside 1..={}",
                self.cfg.max_seq
            )));
        }
        let v = |s: Slot| vars[s.index()];
        let att = self.cfg.attention();
        let (dh, h_kv) = (att.head_dim(), att.n_kv_heads);
        let tok = tape.gather_rows(v(Slot::TokEmb), tokens)?;
        let pos = tape.slice_rows(v(Slot::PosEmb), 0, t)?;
        let mut x = tape.add(tok, pos)?;
        let mut alphas = Vec::new();
        let mut gate_logits = Vec::new();

        for l in 0..self.cfg.n_layers {
            let n = tape.rms_norm_rows(x, NORM_EPS);
            let xn = tape.mul_row(n, v(Slot::AttnNorm(l)))?;
            let mut q = tape.matmul(xn, v(Slot::Wq(l)))?;
            let k = tape.matmul(xn, v(Slot::Wk(l)))?;
            let vv = tape.matmul(xn, v(Slot::Wv(l)))?;

            let neuron_cols: Vec<usize> = (0..h_kv).map(|g| att.first_query_column(g)).collect();
            let wants_gate = !matches!(opts.gate, GateUse::Off);
            let logit = if self.gate_mode == GateMode::Neuron {
                let parts = neuron_cols
                    .iter()
                    .map(|&c| tape.slice_cols(q, c, 1))
                    .collect::<Result<Vec<_>, _>>()?;
                let raw = tape.concat_cols(&parts)?;
                let factor = opts.neuron_scale.unwrap_or(if wants_gate { 0.0 } else { 1.0 });
                if factor != 1.0 {
                    let mut factors = vec![1.0; att.d_model];
                    for &c in &neuron_cols {
                        factors[c] = factor;
                    }
                    q = tape.scale_cols(q, factors)?;
                }
                Some(tape.add_scalar(raw, self.gate_bias))
            } else if wants_gate {
                let raw = tape.matmul_nt(xn, v(Slot::Gate(l)))?;
                Some(tape.add_scalar(raw, self.gate_bias))
            } else {
                None
            };

            let (decisions, window, timing, mode) = match (&opts.gate, logit) {
                (GateUse::Off, _) | (_, None) => (None, 1, EvictionTiming::Delayed, MaskMode::Exact),
                (GateUse::Sampled { noise, window, timing }, Some(lg)) => {
                    let noisy = tape.add_const(lg, &noise[l])?;
                    let scaled = tape.scale(noisy, 1.0 / self.tau);
                    (Some(tape.sigmoid(scaled)), *window, *timing, MaskMode::Relaxed)
                }
                (GateUse::Binary { window, timing }, Some(lg)) => {
                    let vals = tape.value(lg);
                    let bin = vals.data().iter().map(|&z| if binarize(z) { 1.0 } else { 0.0 }).collect();
                    let bin = Tensor::new(vals.shape().to_vec(), bin)?;
                    (Some(tape.leaf(bin)), *window, *timing, MaskMode::Exact)
                }
                (GateUse::Fixed { decisions, window, timing }, Some(_)) => {
                    (Some(tape.leaf(decisions[l].clone())), *window, *timing, MaskMode::Exact)
                }
            };
            if let Some(lg) = logit {
                if wants_gate {
                    gate_logits.push(lg);
                }
            }
            if let Some(a) = decisions {
                alphas.push(a);
            }

            let mut k_heads = Vec::with_capacity(h_kv);
            let mut v_heads = Vec::with_capacity(h_kv);
            for g in 0..h_kv {
                k_heads.push(tape.slice_cols(k, g * dh, dh)?);
                v_heads.push(tape.slice_cols(vv, g * dh, dh)?);
            }
            let mut outs = Vec::with_capacity(att.n_q_heads);
            for qh in 0..att.n_q_heads {
                let g = att.kv_head_of(qh);
                let qs = tape.slice_cols(q, qh * dh, dh)?;
                let raw = tape.matmul_nt(qs, k_heads[g])?;
                let scores = tape.scale(raw, att.scale());
                let masked = tape.eviction_mask(
                    scores,
                    EvictionMaskSpec {
                        decisions: decisions.map(|a| (a, g)),
                        window,
                        source_offset: source_offset(timing, window),
                        mode,
                    },
                )?;
                let w = tape.softmax_rows(masked)?;
                outs.push(tape.matmul(w, v_heads[g])?);
            }
            let cat = tape.concat_cols(&outs)?;
            let proj = tape.matmul(cat, v(Slot::Wo(l)))?;
            x = tape.add(x, proj)?;

            let n2 = tape.rms_norm_rows(x, NORM_EPS);
            let xn2 = tape.mul_row(n2, v(Slot::MlpNorm(l)))?;
            let up = tape.matmul(xn2, v(Slot::WUp(l)))?;
            let up = tape.add_row(up, v(Slot::BUp(l)))?;
            let act = tape.gelu(up);
            let down = tape.matmul(act, v(Slot::WDown(l)))?;
            let down = tape.add_row(down, v(Slot::BDown(l)))?;
            x = tape.add(x, down)?;
        }
        let nf = tape.rms_norm_rows(x, NORM_EPS);
        let xf = tape.mul_row(nf, v(Slot::FinalNorm))?;
        let logits = tape.matmul(xf, v(Slot::Unembed))?;
        Ok(ForwardOutput {
            logits,
            alphas,
            gate_logits,
        })
    }

    /// Hidden state entering layer `layer`'s attention, normalised, for one
    /// token given the residual stream `x`.
    pub(crate) fn attn_input(&self, layer: usize, x: &[f64]) -> Vec<f64> {
        rms_norm_gain(x, self.slot(Slot::AttnNorm(layer)).data())
    }

    pub(crate) fn mlp_residual(&self, layer: usize, x: &[f64]) -> Vec<f64> {
        let xn = rms_norm_gain(x, self.slot(Slot::MlpNorm(layer)).data());
        let mut up = crate::attention::vec_mat(&xn, self.slot(Slot::WUp(layer)));
        for (u, b) in up.iter_mut().zip(self.slot(Slot::BUp(layer)).data()) {
            *u = gelu(*u + b);
        }
        let mut down = crate::attention::vec_mat(&up, self.slot(Slot::WDown(layer)));
        for (d, b) in down.iter_mut().zip(self.slot(Slot::BDown(layer)).data()) {
            *d += b;
        }
        down
    }

    pub(crate) fn embed(&self, token: usize, position: usize) -> Vec<f64> {
        self.slot(Slot::TokEmb)
            .row(token)
            .iter()
            .zip(self.slot(Slot::PosEmb).row(position))
            .map(|(a, b)| a + b)
            .collect()
    }

    pub(crate) fn head(&self, x: &[f64]) -> Vec<f64> {
        let xn = rms_norm_gain(x, self.slot(Slot::FinalNorm).data());
        crate::attention::vec_mat(&xn, self.slot(Slot::Unembed))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }
}

fn rms_norm_gain(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}
