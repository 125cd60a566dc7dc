use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    /// Learning rate of gate parameters.
    pub gate_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            gate_lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
        }
    }
}

/// Adam with two learning-rate groups.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` is `None` for parameters without gradient,
    /// `is_gate(i)` selects the gate learning rate. Returns the global
    /// gradient norm before clipping.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>], is_gate: impl Fn(usize) -> bool) -> f64 {
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let c = &self.cfg;
        let scale = if c.clip > 0.0 && norm > c.clip { c.clip / norm } else { 1.0 };
        self.step += 1;
        let b1t = 1.0 - c.beta1.powi(self.step as i32);
        let b2t = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let lr = if is_gate(i) { c.gate_lr } else { c.lr };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * scale;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                *w -= lr * (*mi / b1t) / ((*vi / b2t).sqrt() + c.eps);
            }
        }
        norm
    }
}
