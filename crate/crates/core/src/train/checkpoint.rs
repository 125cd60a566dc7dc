//! Checkpoints: `manifest.json` describing every tensor plus `weights.bin`
//! holding the values as little-endian f64 in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

use super::{GateMode, ModelConfig, ToyModel};

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
const FORMAT: &str = "dms-checkpoint/1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub gate_mode: GateMode,
    pub gate_bias: f64,
    pub tau: f64,
    /// Free-form run metadata (training config, step, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `model` into directory `dir`, creating it if needed.
pub fn save(dir: &Path, model: &ToyModel, seed: u64, meta: serde_json::Value) -> Result<Manifest, CheckpointError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut tensors = Vec::new();
    let mut bytes = Vec::with_capacity(model.num_parameters() * 8);
    let mut offset = 0;
    for (name, t) in model.names().iter().zip(model.params()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        seed,
        model: model.cfg,
        gate_mode: model.gate_mode,
        gate_bias: model.gate_bias,
        tau: model.tau,
        meta,
        tensors,
    };
    let wpath = dir.join(WEIGHTS);
    fs::write(&wpath, bytes).map_err(io(&wpath))?;
    let mpath = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(io(&mpath))?;
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<(ToyModel, Manifest), CheckpointError> {
    let mpath = dir.join(MANIFEST);
    let bad = |reason: String| CheckpointError::Manifest {
        path: mpath.clone(),
        reason,
    };
    let text = fs::read_to_string(&mpath).map_err(io(&mpath))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(bad(format!("unsupported format '{}'", manifest.format)));
    }
    let wpath = dir.join(WEIGHTS);
    let bytes = fs::read(&wpath).map_err(io(&wpath))?;
    if bytes.len() % 8 != 0 {
        return Err(bad(format!("weights file length {} is not a multiple of 8", bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.shape.iter().product::<usize>() != e.len || e.offset + e.len > values.len() {
            return Err(bad(format!("tensor {} has inconsistent shape or range", e.name)));
        }
        let t = Tensor::new(e.shape.clone(), values[e.offset..e.offset + e.len].to_vec()).map_err(|e| bad(e.to_string()))?;
        named.push((e.name.clone(), t));
    }
    let model = ToyModel::from_parts(manifest.model, manifest.gate_mode, manifest.gate_bias, manifest.tau, named).map_err(bad)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            vocab: 16,
            d_model: 8,
            n_layers: 1,
            n_q_heads: 2,
            n_kv_heads: 1,
            d_ff: 16,
            max_seq: 8,
        };
        let m = ToyModel::new(cfg, GateMode::Vector, &mut stream(4, "init")).unwrap();
        let dir = std::env::temp_dir().join(format!("dms-ckpt-{}", std::process::id()));
        save(&dir, &m, 4, serde_json::json!({"step": 3})).unwrap();
        let (back, man) = load(&dir).unwrap();
        assert_eq!(back, m);
        assert_eq!(man.seed, 4);
        assert_eq!(man.meta["step"], 3);
        fs::write(dir.join(WEIGHTS), [0u8; 12]).unwrap();
        assert!(load(&dir).is_err());
        fs::remove_dir_all(&dir).ok();
    }
}
