use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use dms_core::costmodel::ModelProfile;

use crate::{config_err, create_dir, load_config, write_json, CliError, Common};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub seed: u64,
    /// Preset name.
    pub profile: String,
    /// JSON profile file; takes precedence over `profile`.
    pub profile_file: Option<PathBuf>,
    pub batch: u64,
    pub seq_len: u64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            profile: "llama-3.1-8b".into(),
            profile_file: None,
            batch: 1,
            seq_len: 0,
        }
    }
}

pub(crate) fn run(common: &Common, batch: Option<u64>, seq_len: Option<u64>) -> Result<(), CliError> {
    let mut cfg: CostConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = &common.profile {
        cfg.profile = p.clone();
        cfg.profile_file = None;
    }
    if common.policy.is_some() {
        return Err(CliError::Config("costmodel takes no --policy".into()));
    }
    cfg.batch = batch.unwrap_or(cfg.batch);
    cfg.seq_len = seq_len.unwrap_or(cfg.seq_len);
    let profile = match &cfg.profile_file {
        Some(p) => ModelProfile::load(p),
        None => ModelProfile::preset(&cfg.profile),
    }
    .map_err(config_err)?;
    let r = profile.report(cfg.batch, cfg.seq_len).map_err(config_err)?;
    println!("profile           {}", r.profile);
    println!("batch             {}", r.batch);
    println!("seq_len           {}", r.seq_len);
    println!("flops             {:.6e}", r.flops);
    println!("bytes_read        {:.6e}", r.bytes_read);
    println!("params_from_reads {:.6e}", r.bytes_read / 2.0);
    println!("kv_bytes          {:.6e}", r.kv_bytes);
    println!("latency_seconds   {:.6e}", r.latency_seconds);
    println!("kv_fraction       {:.6}", r.kv_read_fraction);
    if let Some(out) = &common.out {
        create_dir(out)?;
        write_json(&out.join("cost.json"), &serde_json::json!({"seed": cfg.seed, "report": r}))?;
    }
    Ok(())
}
