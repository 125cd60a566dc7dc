//! Token-by-token inference of a [`ToyModel`] through the cache engine.

use crate::attention::vec_mat;
use crate::numerics::{dot, matmul, Tensor};
use crate::train::model::Slot;
use crate::train::{binarize, GateMode, ToyModel};

use super::engine::{CachePolicy, DecodeEngine};
use super::CacheError;

/// Where per-head eviction decisions come from.
#[derive(Clone, Debug)]
pub enum DecisionSource {
    /// Rounded learned gates of the model.
    Learned,
    /// Fixed stream indexed `[layer][kv_head][position]`; positions past
    /// the end read as "keep".
    Scripted(Vec<Vec<Vec<bool>>>),
    /// Every decision is "keep".
    Never,
}

pub struct ModelRunner<'m> {
    model: &'m ToyModel,
    engine: DecodeEngine,
    source: DecisionSource,
    taken: Vec<Vec<Vec<bool>>>,
}

impl<'m> ModelRunner<'m> {
    pub fn new(
        model: &'m ToyModel,
        policy: Box<dyn CachePolicy>,
        page_size: usize,
        source: DecisionSource,
    ) -> Result<Self, CacheError> {
        let cfg = model.cfg.attention();
        let engine = DecodeEngine::new(cfg, model.cfg.n_layers, page_size, policy)?;
        let taken = vec![vec![Vec::new(); cfg.n_kv_heads]; model.cfg.n_layers];
        Ok(Self {
            model,
            engine,
            source,
            taken,
        })
    }

    pub fn engine(&self) -> &DecodeEngine {
        &self.engine
    }

    pub fn into_engine(self) -> DecodeEngine {
        self.engine
    }

    /// Decisions actually applied, `[layer][kv_head][position]`.
    pub fn decisions(&self) -> &[Vec<Vec<bool>>] {
        &self.taken
    }

    /// Binary decisions of every KV head for position `t`. In neuron mode
    /// the borrowed query columns are zeroed once read, unless gates are off.
    fn decide(&self, layer: usize, t: usize, xn: &[f64], q: &mut [f64]) -> Vec<bool> {
        let m = self.model;
        let att = m.cfg.attention();
        let d = (0..att.n_kv_heads)
            .map(|g| match &self.source {
                DecisionSource::Never => false,
                DecisionSource::Scripted(s) => s
                    .get(layer)
                    .and_then(|h| h.get(g))
                    .and_then(|row| row.get(t))
                    .copied()
                    .unwrap_or(false),
                DecisionSource::Learned => {
                    let logit = match m.gate_mode {
                        GateMode::Vector => dot(xn, m.slot(Slot::Gate(layer)).row(g)) + m.gate_bias,
                        GateMode::Neuron => q[att.first_query_column(g)] + m.gate_bias,
                    };
                    binarize(logit)
                }
            })
            .collect();
        if m.gate_mode == GateMode::Neuron && !matches!(self.source, DecisionSource::Never) {
            for g in 0..att.n_kv_heads {
                q[att.first_query_column(g)] = 0.0;
            }
        }
        d
    }

    fn projections(&self, layer: usize) -> [&'m Tensor; 4] {
        let m = self.model;
        [
            m.slot(Slot::Wq(layer)),
            m.slot(Slot::Wk(layer)),
            m.slot(Slot::Wv(layer)),
            m.slot(Slot::Wo(layer)),
        ]
    }

    /// Feeds one token at the next position and returns its logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>, CacheError> {
        let t = self.engine.position();
        let m = self.model;
        self.check(token, t)?;
        let mut x = m.embed(token, t);
        for l in 0..m.cfg.n_layers {
            let xn = m.attn_input(l, &x);
            let p = self.projections(l);
            let mut q = vec_mat(&xn, p[0]);
            let k = vec_mat(&xn, p[1]);
            let v = vec_mat(&xn, p[2]);
            let d = self.decide(l, t, &xn, &mut q);
            for (g, &b) in d.iter().enumerate() {
                self.taken[l][g].push(b);
            }
            let ctx = self.engine.attend_layer(l, &q, &k, &v, &d)?;
            for (a, b) in x.iter_mut().zip(vec_mat(&ctx, p[3])) {
                *a += b;
            }
            let r = m.mlp_residual(l, &x);
            for (a, b) in x.iter_mut().zip(r) {
                *a += b;
            }
        }
        self.engine.end_step();
        Ok(m.head(&x))
    }

    fn check(&self, token: usize, t: usize) -> Result<(), CacheError> {
        if token >= self.model.cfg.vocab {
            return Err(CacheError::Config(format!("token {token} outside vocabulary")));
        }
        if t >= self.model.cfg.max_seq {
            return Err(CacheError::Config(format!(
                "position {t} exceeds model context {}",
                self.model.cfg.max_seq
            )));
        }
        Ok(())
    }

    /// Processes a prompt and returns the logits at every prompt position.
    /// Uses one masked pass per layer when the policy allows it.
    pub fn prefill(&mut self, tokens: &[usize]) -> Result<Tensor, CacheError> {
        let m = self.model;
        if tokens.is_empty() {
            return Ok(Tensor::zeros(&[0, m.cfg.vocab]));
        }
        if self.engine.position() != 0 {
            return Err(CacheError::Config("prefill requires an empty cache".into()));
        }
        if !self.engine.batched_prefill() {
            self.engine.set_prefill(true);
            let rows = tokens.iter().map(|&tok| self.step(tok)).collect::<Result<Vec<_>, _>>();
            self.engine.set_prefill(false);
            return Ok(Tensor::from_rows(&rows?)?);
        }
        for (i, &tok) in tokens.iter().enumerate() {
            self.check(tok, i)?;
        }
        let att = m.cfg.attention();
        let p = tokens.len();
        let mut xs: Vec<Vec<f64>> = tokens.iter().enumerate().map(|(i, &tok)| m.embed(tok, i)).collect();
        for l in 0..m.cfg.n_layers {
            let pr = self.projections(l);
            let xn = Tensor::from_rows(&xs.iter().map(|x| m.attn_input(l, x)).collect::<Vec<_>>())?;
            let mut q = matmul(&xn, pr[0])?;
            let k = matmul(&xn, pr[1])?;
            let v = matmul(&xn, pr[2])?;
            let mut dec = vec![Vec::with_capacity(p); att.n_kv_heads];
            for i in 0..p {
                let d = self.decide(l, i, xn.row(i), q.row_mut(i));
                for (g, b) in d.into_iter().enumerate() {
                    dec[g].push(b);
                    self.taken[l][g].push(b);
                }
            }
            let ctx = self.engine.prefill_layer(l, &q, &k, &v, &dec)?;
            let proj = matmul(&ctx, pr[3])?;
            for (i, x) in xs.iter_mut().enumerate() {
                for (a, b) in x.iter_mut().zip(proj.row(i)) {
                    *a += b;
                }
                let r = m.mlp_residual(l, x);
                for (a, b) in x.iter_mut().zip(r) {
                    *a += b;
                }
            }
        }
        self.engine.end_prefill(p);
        Ok(Tensor::from_rows(&xs.iter().map(|x| m.head(x)).collect::<Vec<_>>())?)
    }
}
