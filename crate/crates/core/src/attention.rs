//! Grouped-query causal self-attention.
//!
//! Weights use the `x · W` convention: `W_q` is `d × d`, `W_k`/`W_v` are
//! `d × (n_kv · d_h)` and `W_o` is `d × d`. Query head `h` reads KV head
//! `h / group_size`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, matmul, softmax_rows, NumericsError, Tensor};
use crate::rng::{normal, RandomStream};
use crate::train::{GateMode, GateParams, MaskSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("invalid attention config: {0}")]
    Config(String),
    #[error("mask covers {mask} tokens but the sequence has {seq}")]
    MaskLength { mask: usize, seq: usize },
    #[error("mask has {mask} heads, config has {expected} kv heads")]
    MaskHeads { mask: usize, expected: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_q_heads: usize, n_kv_heads: usize) -> Result<Self, AttentionError> {
        let cfg = Self {
            d_model,
            n_q_heads,
            n_kv_heads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        if self.d_model == 0 || self.n_q_heads == 0 || self.n_kv_heads == 0 {
            return Err(AttentionError::Config("dimensions must be positive".into()));
        }
        if self.d_model % self.n_q_heads != 0 {
            return Err(AttentionError::Config(format!(
                "d_model {} not divisible by n_q_heads {}",
                self.d_model, self.n_q_heads
            )));
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return Err(AttentionError::Config(format!(
                "n_q_heads {} not divisible by n_kv_heads {}",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_q_heads
    }

    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    /// KV head read by query head `q`.
    pub fn kv_head_of(&self, q: usize) -> usize {
        q / self.group_size()
    }

    /// Column of `W_q` holding dimension 0 of the first query head of group `g`.
    pub fn first_query_column(&self, g: usize) -> usize {
        g * self.group_size() * self.head_dim()
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl ProjectionSet {
    /// Gaussian init with standard deviation `1/sqrt(d)`.
    pub fn random(cfg: &AttentionConfig, rng: &mut RandomStream) -> Self {
        let d = cfg.d_model;
        let s = 1.0 / (d as f64).sqrt();
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal(rng) * s).collect();
            Tensor::new(vec![rows, cols], data).expect("projection shape")
        };
        Self {
            wq: draw(d, d),
            wk: draw(d, cfg.kv_dim()),
            wv: draw(d, cfg.kv_dim()),
            wo: draw(d, d),
        }
    }

    pub fn check(&self, cfg: &AttentionConfig) -> Result<(), AttentionError> {
        let d = cfg.d_model;
        let want = [
            ("wq", &self.wq, [d, d]),
            ("wk", &self.wk, [d, cfg.kv_dim()]),
            ("wv", &self.wv, [d, cfg.kv_dim()]),
            ("wo", &self.wo, [d, d]),
        ];
        for (name, t, shape) in want {
            if t.shape() != shape {
                return Err(AttentionError::Config(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Projects one hidden vector: `(q, k, v)` flattened per head.
    pub fn project_token(&self, h: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (vec_mat(h, &self.wq), vec_mat(h, &self.wk), vec_mat(h, &self.wv))
    }
}

/// `x · W` for a single row vector.
pub fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let n = w.cols();
    let mut out = vec![0.0; n];
    for (p, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(p)) {
            *o += xv * wv;
        }
    }
    out
}

/// Causal grouped-query attention over `h: T×d`, with the eviction mask
/// applied on the fly when given.
pub fn attend(
    h: &Tensor,
    proj: &ProjectionSet,
    cfg: &AttentionConfig,
    mask: Option<&MaskSpec>,
) -> Result<Tensor, AttentionError> {
    attend_with(h, proj, cfg, mask, None)
}

/// As [`attend`], optionally multiplying query column `c` by `query_scale[c]`
/// before scoring.
pub fn attend_with(
    h: &Tensor,
    proj: &ProjectionSet,
    cfg: &AttentionConfig,
    mask: Option<&MaskSpec>,
    query_scale: Option<&[f64]>,
) -> Result<Tensor, AttentionError> {
    cfg.validate()?;
    proj.check(cfg)?;
    let t = h.rows();
    if let Some(m) = mask {
        if m.len() != t {
            return Err(AttentionError::MaskLength { mask: m.len(), seq: t });
        }
        if m.heads() != cfg.n_kv_heads {
            return Err(AttentionError::MaskHeads {
                mask: m.heads(),
                expected: cfg.n_kv_heads,
            });
        }
    }
    let mut q = matmul(h, &proj.wq)?;
    if let Some(s) = query_scale {
        for i in 0..t {
            for (x, f) in q.row_mut(i).iter_mut().zip(s) {
                *x *= f;
            }
        }
    }
    let k = matmul(h, &proj.wk)?;
    let v = matmul(h, &proj.wv)?;
    let dh = cfg.head_dim();
    let scale = cfg.scale();
    let mut heads_out = Tensor::zeros(&[t, cfg.d_model]);
    for qh in 0..cfg.n_q_heads {
        let g = cfg.kv_head_of(qh);
        let mut scores = Tensor::zeros(&[t, t]);
        for i in 0..t {
            let qi = &q.row(i)[qh * dh..(qh + 1) * dh];
            for j in 0..t {
                let s = if j > i {
                    f64::NEG_INFINITY
                } else {
                    let kj = &k.row(j)[g * dh..(g + 1) * dh];
                    let off = mask.map_or(0.0, |m| m.offset(g, i, j));
                    dot(qi, kj) * scale + off
                };
                scores.set(i, j, s);
            }
        }
        let weights = softmax_rows(&scores)?;
        for i in 0..t {
            let out = &mut heads_out.row_mut(i)[qh * dh..(qh + 1) * dh];
            for j in 0..=i {
                let a = weights.get(i, j);
                if a == 0.0 {
                    continue;
                }
                let vj = &v.row(j)[g * dh..(g + 1) * dh];
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += a * x;
                }
            }
        }
    }
    Ok(matmul(&heads_out, &proj.wo)?)
}

/// Pre-sigmoid gate logit for every KV head of `layer` at one step.
///
/// Vector mode: `h_t · w + b`. Neuron mode: dimension 0 of the first query
/// head in each group, plus `b`.
pub fn gate_logit(
    h_t: &[f64],
    gate: &GateParams,
    layer: usize,
    proj: &ProjectionSet,
    cfg: &AttentionConfig,
) -> Vec<f64> {
    match gate.mode {
        GateMode::Vector => {
            let w = &gate.weights[layer];
            (0..cfg.n_kv_heads).map(|g| dot(h_t, w.row(g)) + gate.bias).collect()
        }
        GateMode::Neuron => (0..cfg.n_kv_heads)
            .map(|g| {
                let col = cfg.first_query_column(g);
                let q0: f64 = h_t.iter().enumerate().map(|(p, x)| x * proj.wq.get(p, col)).sum();
                q0 + gate.bias
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::train::EvictionTiming;

    fn random_h(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, "h");
        Tensor::new(vec![t, d], (0..t * d).map(|_| normal(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::new(64, 4, 2).is_ok());
        assert!(AttentionConfig::new(64, 3, 1).is_err());
        assert!(AttentionConfig::new(64, 4, 3).is_err());
        let c = AttentionConfig::new(64, 4, 2).unwrap();
        assert_eq!((c.head_dim(), c.group_size(), c.kv_dim()), (16, 2, 32));
        assert_eq!(c.first_query_column(1), 32);
    }

    #[test]
    fn single_token_returns_projected_value() {
        let cfg = AttentionConfig::new(8, 2, 1).unwrap();
        let proj = ProjectionSet::random(&cfg, &mut stream(1, "p"));
        let h = random_h(1, 8, 2);
        let out = attend(&h, &proj, &cfg, None).unwrap();
        // a_11 = 1, so each query head outputs v_1 of its kv head.
        let v = vec_mat(h.row(0), &proj.wv);
        let concat: Vec<f64> = (0..2).flat_map(|_| v[..4].to_vec()).collect();
        let expected = vec_mat(&concat, &proj.wo);
        for (a, b) in out.row(0).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_mask_is_bitwise_identical() {
        let cfg = AttentionConfig::new(16, 4, 2).unwrap();
        let proj = ProjectionSet::random(&cfg, &mut stream(3, "p"));
        let h = random_h(9, 16, 4);
        let mask = MaskSpec::new(vec![vec![0.0; 9]; 2], 3, EvictionTiming::Delayed).unwrap();
        let a = attend(&h, &proj, &cfg, None).unwrap();
        let b = attend(&h, &proj, &cfg, Some(&mask)).unwrap();
        assert_eq!(a, b);
    }

    /// Reference: physically delete masked columns before the softmax.
    fn column_deletion_oracle(
        h: &Tensor,
        proj: &ProjectionSet,
        cfg: &AttentionConfig,
        decisions: &[Vec<f64>],
        w: usize,
    ) -> Tensor {
        let t = h.rows();
        let dh = cfg.head_dim();
        let q = matmul(h, &proj.wq).unwrap();
        let k = matmul(h, &proj.wk).unwrap();
        let v = matmul(h, &proj.wv).unwrap();
        let mut cat = Tensor::zeros(&[t, cfg.d_model]);
        for qh in 0..cfg.n_q_heads {
            let g = qh / cfg.group_size();
            for i in 0..t {
                let visible: Vec<usize> = (0..=i)
                    .filter(|&j| !(decisions[g][j] == 1.0 && i >= j + w))
                    .collect();
                let logits: Vec<f64> = visible
                    .iter()
                    .map(|&j| {
                        let mut s = 0.0;
                        for c in 0..dh {
                            s += q.get(i, qh * dh + c) * k.get(j, g * dh + c);
                        }
                        s / (dh as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for (&j, l) in visible.iter().zip(&logits) {
                    let a = (l - m).exp() / z;
                    for c in 0..dh {
                        let cur = cat.get(i, qh * dh + c);
                        cat.set(i, qh * dh + c, cur + a * v.get(j, g * dh + c));
                    }
                }
            }
        }
        matmul(&cat, &proj.wo).unwrap()
    }

    #[test]
    fn binary_mask_matches_column_deletion() {
        let cfg = AttentionConfig::new(16, 4, 2).unwrap();
        let proj = ProjectionSet::random(&cfg, &mut stream(5, "p"));
        let h = random_h(8, 16, 6);
        let mut rng = stream(7, "d");
        use rand::Rng;
        let decisions: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..8).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect())
            .collect();
        let mask = MaskSpec::binary(decisions.clone(), 4, EvictionTiming::Delayed).unwrap();
        let got = attend(&h, &proj, &cfg, Some(&mask)).unwrap();
        let want = column_deletion_oracle(&h, &proj, &cfg, &decisions, 4);
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn causality_forward_difference_probe() {
        let cfg = AttentionConfig::new(8, 2, 2).unwrap();
        let proj = ProjectionSet::random(&cfg, &mut stream(8, "p"));
        let h = random_h(6, 8, 9);
        let base = attend(&h, &proj, &cfg, None).unwrap();
        for j in 0..6 {
            let mut hp = h.clone();
            hp.set(j, 0, hp.get(j, 0) + 1e-3);
            let out = attend(&hp, &proj, &cfg, None).unwrap();
            for i in 0..6 {
                let changed = out.row(i).iter().zip(base.row(i)).any(|(a, b)| a != b);
                assert_eq!(changed, i >= j, "query {i} perturbed key {j}");
            }
        }
    }

    #[test]
    fn gate_logit_modes() {
        let cfg = AttentionConfig::new(8, 4, 2).unwrap();
        let proj = ProjectionSet::random(&cfg, &mut stream(10, "p"));
        let g = GateParams::zeros(GateMode::Vector, 1, &cfg);
        let h = random_h(1, 8, 11);
        assert_eq!(gate_logit(h.row(0), &g, 0, &proj, &cfg), vec![-5.0, -5.0]);

        // q_first[0] = 2 for group 0: set W_q so that h·W_q[:,0] = 2.
        let mut proj2 = proj.clone();
        let hv = vec![1.0; 8];
        for p in 0..8 {
            proj2.wq.set(p, 0, 0.25);
        }
        let n = GateParams::zeros(GateMode::Neuron, 1, &cfg);
        let logits = gate_logit(&hv, &n, 0, &proj2, &cfg);
        assert!((logits[0] - (-3.0)).abs() < 1e-15);

        let mut rng = stream(12, "w");
        let mut gv = GateParams::zeros(GateMode::Vector, 1, &cfg);
        for x in gv.weights[0].data_mut() {
            *x = normal(&mut rng);
        }
        let got = gate_logit(h.row(0), &gv, 0, &proj, &cfg);
        for (head, logit) in got.iter().enumerate() {
            let mut s = 0.0;
            for p in 0..8 {
                s += h.get(0, p) * gv.weights[0].get(head, p);
            }
            assert_eq!(*logit, s - 5.0);
        }
    }
}
