//! Analytical per-step FLOPs, HBM reads and latency of a decoder LLM, and
//! the conversion from cache ledgers to budget axes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::kvcache::ReadLedger;

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error("unknown profile '{0}'; presets: llama-3.1-8b, qwen-r1-7b")]
    UnknownProfile(String),
    #[error("invalid profile field {field}: {reason}")]
    Field { field: &'static str, reason: String },
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("cannot read profile {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse profile {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub const H100_PEAK_FLOPS: f64 = 989.5e12;
pub const H100_HBM_BANDWIDTH: f64 = 3.35e12;

fn default_bytes() -> f64 {
    2.0
}

/// Architecture and accelerator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    #[serde(default)]
    pub name: String,
    pub n: u64,
    pub d: u64,
    pub d_ff: u64,
    pub d_kv: u64,
    #[serde(rename = "V")]
    pub vocab: u64,
    pub peak_flops: f64,
    pub hbm_bandwidth: f64,
    #[serde(default = "default_bytes")]
    pub bytes_per_param: f64,
}

/// Which projection term the weight-read part of the reads estimate uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadsVariant {
    /// `4·d·d_kv` for the K/V projections, mirroring the FLOPs estimate.
    #[default]
    KvProjection,
    /// `4·d·d_ff` in that slot, as the formula is sometimes quoted.
    FfTerm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub profile: String,
    pub batch: u64,
    pub seq_len: u64,
    pub flops: f64,
    pub bytes_read: f64,
    pub kv_bytes: f64,
    pub compute_seconds: f64,
    pub memory_seconds: f64,
    pub latency_seconds: f64,
    pub kv_read_fraction: f64,
}

pub const PRESETS: [&str; 2] = ["llama-3.1-8b", "qwen-r1-7b"];

impl ModelProfile {
    pub fn llama_3_1_8b() -> Self {
        Self {
            name: "llama-3.1-8b".into(),
            n: 32,
            d: 4096,
            d_ff: 14336,
            d_kv: 1024,
            vocab: 128256,
            peak_flops: H100_PEAK_FLOPS,
            hbm_bandwidth: H100_HBM_BANDWIDTH,
            bytes_per_param: 2.0,
        }
    }

    /// 7B reasoning model on a Qwen2.5-7B backbone (4 KV heads of 128).
    pub fn qwen_r1_7b() -> Self {
        Self {
            name: "qwen-r1-7b".into(),
            n: 28,
            d: 3584,
            d_ff: 18944,
            d_kv: 512,
            vocab: 152064,
            peak_flops: H100_PEAK_FLOPS,
            hbm_bandwidth: H100_HBM_BANDWIDTH,
            bytes_per_param: 2.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self, CostError> {
        match name {
            "llama-3.1-8b" => Ok(Self::llama_3_1_8b()),
            "qwen-r1-7b" => Ok(Self::qwen_r1_7b()),
            other => Err(CostError::UnknownProfile(other.to_string())),
        }
    }

    /// Reads a JSON profile with fields `n, d, d_ff, d_kv, V, peak_flops,
    /// hbm_bandwidth` and optional `bytes_per_param`, `name`.
    pub fn load(path: &Path) -> Result<Self, CostError> {
        let text = std::fs::read_to_string(path).map_err(|source| CostError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut p: Self = serde_json::from_str(&text).map_err(|source| CostError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        if p.name.is_empty() {
            p.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let ints = [("n", self.n), ("d", self.d), ("d_ff", self.d_ff), ("d_kv", self.d_kv), ("V", self.vocab)];
        for (field, v) in ints {
            if v == 0 {
                return Err(CostError::Field {
                    field,
                    reason: "must be positive".into(),
                });
            }
        }
        let reals = [
            ("peak_flops", self.peak_flops),
            ("hbm_bandwidth", self.hbm_bandwidth),
            ("bytes_per_param", self.bytes_per_param),
        ];
        for (field, v) in reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CostError::Field {
                    field,
                    reason: format!("must be positive and finite, got {v}"),
                });
            }
        }
        Ok(())
    }

    /// `nB(6·d·d_ff + 4d² + 4·d·d_kv + 4dL) + 2BdV`.
    pub fn flops(&self, b: u64, l: u64) -> f64 {
        let (n, d, dff, dkv, v) = self.dims();
        let (b, l) = (b as f64, l as f64);
        n * b * (6.0 * d * dff + 4.0 * d * d + 4.0 * d * dkv + 4.0 * d * l) + 2.0 * b * d * v
    }

    /// Coefficient of `B·L` in [`Self::flops`]: `4nd`.
    pub fn flops_bl_coefficient(&self) -> u64 {
        4 * self.n * self.d
    }

    /// HBM bytes: `n(6·d·d_ff + 4d² + 4·d·d_kv + 4BL·d_kv) + 2dV` at two
    /// bytes per parameter, rescaled for other widths.
    pub fn reads(&self, b: u64, l: u64) -> f64 {
        self.reads_with(b, l, ReadsVariant::KvProjection)
    }

    pub fn reads_with(&self, b: u64, l: u64, variant: ReadsVariant) -> f64 {
        let (n, d, dff, dkv, v) = self.dims();
        let proj = match variant {
            ReadsVariant::KvProjection => dkv,
            ReadsVariant::FfTerm => dff,
        };
        let weights = n * (6.0 * d * dff + 4.0 * d * d + 4.0 * d * proj) + 2.0 * d * v;
        (weights + self.kv_units(b, l)) * self.bytes_per_param / 2.0
    }

    /// Coefficient of `B·L` in [`Self::reads`]: `4n·d_kv` at two bytes.
    pub fn reads_bl_coefficient(&self) -> f64 {
        4.0 * (self.n * self.d_kv) as f64 * self.bytes_per_param / 2.0
    }

    fn kv_units(&self, b: u64, l: u64) -> f64 {
        4.0 * self.n as f64 * b as f64 * l as f64 * self.d_kv as f64
    }

    pub fn kv_bytes(&self, b: u64, l: u64) -> f64 {
        self.kv_units(b, l) * self.bytes_per_param / 2.0
    }

    /// Latency under ideal compute/memory overlap, and the share of HBM
    /// bytes spent on the KV cache.
    pub fn latency(&self, b: u64, l: u64) -> Result<(f64, f64), CostError> {
        let r = self.report(b, l)?;
        Ok((r.latency_seconds, r.kv_read_fraction))
    }

    pub fn report(&self, b: u64, l: u64) -> Result<CostReport, CostError> {
        if b == 0 {
            return Err(CostError::ZeroBatch);
        }
        let flops = self.flops(b, l);
        let bytes = self.reads(b, l);
        let kv = self.kv_bytes(b, l);
        let compute = flops / self.peak_flops;
        let memory = bytes / self.hbm_bandwidth;
        Ok(CostReport {
            profile: self.name.clone(),
            batch: b,
            seq_len: l,
            flops,
            bytes_read: bytes,
            kv_bytes: kv,
            compute_seconds: compute,
            memory_seconds: memory,
            latency_seconds: compute.max(memory),
            kv_read_fraction: kv / bytes,
        })
    }

    fn dims(&self) -> (f64, f64, f64, f64, f64) {
        (
            self.n as f64,
            self.d as f64,
            self.d_ff as f64,
            self.d_kv as f64,
            self.vocab as f64,
        )
    }
}

/// Budget axes of a run in token units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveAxes {
    pub kv_token_reads: f64,
    pub peak_tokens: f64,
}

/// Copies the decode-phase totals of a ledger. Page-retrieval reads and
/// page metadata are already booked by the engine.
pub fn effective_axes(ledger: &ReadLedger) -> EffectiveAxes {
    EffectiveAxes {
        kv_token_reads: ledger.reads_tokens(),
        peak_tokens: ledger.peak_tokens(),
    }
}

/// Reads of a dense decode of `n` tokens after a `p`-token prompt:
/// `n·p + n(n+1)/2`.
pub fn dense_reads(p: u64, n: u64) -> u64 {
    n * p + n * (n + 1) / 2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficients() {
        let p = ModelProfile::llama_3_1_8b();
        assert_eq!(p.flops_bl_coefficient(), 524_288);
        assert_eq!(p.reads_bl_coefficient(), 131_072.0);
        assert_eq!(p.flops(1, 4096) - p.flops(1, 0), 524_288.0 * 4096.0);
        assert_eq!(p.flops(2, 0), 2.0 * p.flops(1, 0));
        assert_eq!(p.reads(1, 0), p.reads(64, 0));
    }

    #[test]
    fn reads_identity() {
        let p = ModelProfile::llama_3_1_8b();
        let params = p.reads(1, 0) / 2.0;
        assert!((7.4e9..=7.6e9).contains(&params), "{params}");
        assert!(p.reads_with(1, 0, ReadsVariant::FfTerm) > p.reads(1, 0));
    }

    #[test]
    fn single_token_is_memory_bound() {
        let p = ModelProfile::llama_3_1_8b();
        let r = p.report(1, 0).unwrap();
        assert!(r.memory_seconds > r.compute_seconds);
        assert!((r.latency_seconds - 4.48e-3).abs() < 0.01e-3, "{}", r.latency_seconds);
        assert!(matches!(p.report(0, 0), Err(CostError::ZeroBatch)));
    }

    #[test]
    fn dense_reads_closed_form() {
        assert_eq!(dense_reads(4, 3), 18);
        for p in 0..20 {
            for n in 0..20 {
                assert_eq!(dense_reads(p, n), (0..n).map(|t| p + t + 1).sum::<u64>());
            }
        }
    }

    #[test]
    fn unknown_preset_lists_names() {
        let e = ModelProfile::preset("gpt-2").unwrap_err().to_string();
        for name in PRESETS {
            assert!(e.contains(name));
        }
    }
}
