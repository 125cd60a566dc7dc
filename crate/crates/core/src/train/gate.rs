//! Eviction gates and their Gumbel-sigmoid (binary-concrete) relaxation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::numerics::{sigmoid, Tensor};
use crate::rng::RandomStream;

/// Logit offset that keeps eviction off at the start of retrofitting.
pub const DEFAULT_GATE_BIAS: f64 = -5.0;
/// Low relaxation temperature; samples are close to binary.
pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// Trainable vector `w` per layer and KV head: logit = `h·w + b`.
    Vector,
    /// Dimension 0 of the first query head of each group is read as the
    /// logit and zeroed before attention.
    Neuron,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub mode: GateMode,
    /// One `n_kv × d` matrix per layer; row `g` is the gate vector of KV head `g`.
    pub weights: Vec<Tensor>,
    pub bias: f64,
    pub tau: f64,
}

impl GateParams {
    /// All-zero gate vectors with the default bias and temperature.
    pub fn zeros(mode: GateMode, n_layers: usize, cfg: &AttentionConfig) -> Self {
        Self {
            mode,
            weights: (0..n_layers)
                .map(|_| Tensor::zeros(&[cfg.n_kv_heads, cfg.d_model]))
                .collect(),
            bias: DEFAULT_GATE_BIAS,
            tau: DEFAULT_TAU,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau > 0.0) {
            return Err(format!("gate temperature must be > 0, got {}", self.tau));
        }
        if !self.bias.is_finite() {
            return Err("gate bias must be finite".into());
        }
        Ok(())
    }
}

/// Logistic noise `log u - log(1 - u)`, `u ~ U(0, 1)`.
pub fn logistic_noise(rng: &mut RandomStream) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    u.ln() - (-u).ln_1p()
}

/// Draws a relaxed decision `sigmoid((logit + g) / tau)`, or returns
/// `sigmoid(logit)` when `deterministic`.
pub fn sample_gate(logit: f64, tau: f64, rng: &mut RandomStream, deterministic: bool) -> f64 {
    assert!(tau > 0.0, "tau must be positive");
    if deterministic {
        sigmoid(logit)
    } else {
        relaxed_gate(logit, logistic_noise(rng), tau)
    }
}

/// The relaxation with explicit (frozen) noise.
pub fn relaxed_gate(logit: f64, noise: f64, tau: f64) -> f64 {
    sigmoid((logit + noise) / tau)
}

/// `d alpha / d logit` of [`relaxed_gate`].
pub fn relaxed_gate_grad(alpha: f64, tau: f64) -> f64 {
    alpha * (1.0 - alpha) / tau
}

/// Inference decision: `sigmoid(logit)` rounded to the nearest integer.
pub fn binarize(logit: f64) -> bool {
    sigmoid(logit) >= 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn deterministic_values() {
        let mut rng = stream(0, "g");
        assert!((sample_gate(-5.0, 0.1, &mut rng, true) - 0.006_692_850_924_284_856).abs() < 1e-7);
        assert_eq!(sample_gate(0.0, 0.1, &mut rng, true), 0.5);
        assert!(!binarize(-5.0));
        assert!(binarize(0.0));
        assert!(binarize(0.3));
    }

    #[test]
    fn eviction_effectively_off_at_init() {
        let mut rng = stream(42, "gate");
        let n = 100_000;
        let evicted = (0..n)
            .filter(|_| sample_gate(-5.0, 0.1, &mut rng, false).round() >= 1.0)
            .count();
        let freq = evicted as f64 / n as f64;
        assert!(freq <= 0.01, "eviction frequency {freq}");
    }

    #[test]
    fn relaxed_gradient_matches_finite_difference() {
        let (logit, noise, tau) = (0.3, -0.1, 0.5);
        let h = 1e-6;
        let fd = (relaxed_gate(logit + h, noise, tau) - relaxed_gate(logit - h, noise, tau)) / (2.0 * h);
        let a = relaxed_gate(logit, noise, tau);
        assert!((fd - relaxed_gate_grad(a, tau)).abs() < 1e-8);
    }
}
