use std::fmt::Write as _;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use dms_core::baselines::{PolicyBudget, PolicyKind};
use dms_core::kvcache::{DecisionSource, LedgerRecord, ModelRunner, ReadLedger, DEFAULT_PAGE_SIZE};
use dms_core::rng::stream;
use dms_core::train::checkpoint;
use dms_core::train::{GateMode, ModelConfig, ToyModel};

use crate::{config_err, create_dir, load_config, require_positive, write_file, write_json, CliError, Common};

/// Eviction decisions fed to the cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DecisionScript {
    /// Rounded gates of the checkpoint.
    Learned,
    Never,
    /// Every token is flagged.
    All,
    /// Independent flags with probability `rate`.
    Bernoulli { rate: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub seed: u64,
    pub policy: PolicyKind,
    pub window: usize,
    /// KV budget of tova, h2o and quest.
    pub budget: Option<usize>,
    pub page_size: usize,
    /// Model checkpoint directory; a seeded random model is used when absent.
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub gate_mode: GateMode,
    /// Defaults to `learned` with a checkpoint and `never` without.
    pub decisions: Option<DecisionScript>,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub sequences: usize,
    /// Byte file to cut prompts from; random tokens otherwise.
    pub corpus: Option<PathBuf>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            policy: PolicyKind::Dms,
            window: 16,
            budget: None,
            page_size: DEFAULT_PAGE_SIZE,
            checkpoint: None,
            model: ModelConfig::default(),
            gate_mode: GateMode::Vector,
            decisions: None,
            prompt_len: 64,
            gen_len: 64,
            sequences: 4,
            corpus: None,
        }
    }
}

#[derive(Serialize)]
struct SequenceRecord<'a> {
    seed: u64,
    policy: &'a str,
    sequence: usize,
    prompt_len: usize,
    gen_len: usize,
    prefill_reads: f64,
    #[serde(flatten)]
    record: LedgerRecord,
}

impl SimulateConfig {
    fn validate(&self) -> Result<(), CliError> {
        require_positive("window", self.window)?;
        require_positive("page_size", self.page_size)?;
        require_positive("sequences", self.sequences)?;
        if self.checkpoint.is_none() {
            self.model.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        }
        if let Some(DecisionScript::Bernoulli { rate }) = self.decisions {
            if !(0.0..=1.0).contains(&rate) {
                return Err(CliError::Config(format!("decisions.rate must be in [0, 1], got {rate}")));
            }
        }
        if self.decisions == Some(DecisionScript::Learned) && self.checkpoint.is_none() {
            return Err(CliError::Config("learned decisions need a checkpoint".into()));
        }
        if self.prompt_len + self.gen_len == 0 {
            return Err(CliError::Config("prompt_len + gen_len must be >= 1".into()));
        }
        Ok(())
    }
}

fn script(s: &DecisionScript, layers: usize, heads: usize, len: usize, seed: u64, seq: usize) -> DecisionSource {
    match s {
        DecisionScript::Learned => DecisionSource::Learned,
        DecisionScript::Never => DecisionSource::Never,
        DecisionScript::All => DecisionSource::Scripted(vec![vec![vec![true; len]; heads]; layers]),
        &DecisionScript::Bernoulli { rate } => {
            let mut rng = stream(seed, &format!("simulate/decisions/{seq}"));
            DecisionSource::Scripted(
                (0..layers)
                    .map(|_| (0..heads).map(|_| (0..len).map(|_| rng.gen::<f64>() < rate).collect()).collect())
                    .collect(),
            )
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

pub(crate) fn run(common: &Common) -> Result<(), CliError> {
    let mut cfg: SimulateConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = &common.policy {
        cfg.policy = p.parse().map_err(config_err)?;
    }
    if common.profile.is_some() {
        return Err(CliError::Config("simulate takes no --profile".into()));
    }
    cfg.validate()?;
    let seed = cfg.seed;
    let model = match &cfg.checkpoint {
        Some(dir) => checkpoint::load(dir).map_err(config_err)?.0,
        None => ToyModel::new(cfg.model, cfg.gate_mode, &mut stream(seed, "model/init")).map_err(CliError::Config)?,
    };
    let total = cfg.prompt_len + cfg.gen_len;
    if total > model.cfg.max_seq {
        return Err(CliError::Config(format!(
            "prompt_len + gen_len = {total} exceeds model context {}",
            model.cfg.max_seq
        )));
    }
    let corpus = match &cfg.corpus {
        Some(p) => Some(std::fs::read(p).map_err(|e| CliError::Config(format!("corpus {}: {e}", p.display())))?),
        None => None,
    };
    if let Some(c) = &corpus {
        if c.len() < cfg.prompt_len {
            return Err(CliError::Config("corpus shorter than one prompt".into()));
        }
    }
    let budget = cfg.budget.map(PolicyBudget::new).transpose().map_err(config_err)?;
    // Build once up front so policy errors surface before any compute.
    cfg.policy.build(cfg.window, budget, cfg.page_size).map_err(config_err)?;
    let decisions = cfg.decisions.clone().unwrap_or(if cfg.checkpoint.is_some() {
        DecisionScript::Learned
    } else {
        DecisionScript::Never
    });
    let att = model.cfg.attention();

    let mut lines = String::new();
    let mut merged: Option<ReadLedger> = None;
    for seq in 0..cfg.sequences {
        let mut rng = stream(seed, &format!("simulate/prompt/{seq}"));
        let prompt: Vec<usize> = match &corpus {
            Some(c) => {
                let start = rng.gen_range(0..=c.len() - cfg.prompt_len);
                c[start..start + cfg.prompt_len].iter().map(|&b| b as usize % model.cfg.vocab).collect()
            }
            None => (0..cfg.prompt_len).map(|_| rng.gen_range(0..model.cfg.vocab)).collect(),
        };
        let policy = cfg.policy.build(cfg.window, budget, cfg.page_size).map_err(config_err)?;
        let source = script(&decisions, model.cfg.n_layers, att.n_kv_heads, total, seed, seq);
        let mut runner = ModelRunner::new(&model, policy, cfg.page_size, source).map_err(config_err)?;
        let mut next = if prompt.is_empty() {
            0
        } else {
            let logits = runner.prefill(&prompt).map_err(numerical)?;
            argmax(logits.row(logits.rows() - 1))
        };
        for _ in 0..cfg.gen_len {
            let logits = runner.step(next).map_err(numerical)?;
            if logits.iter().any(|x| !x.is_finite()) {
                return Err(CliError::Numerical(format!("non-finite logits in sequence {seq}")));
            }
            next = argmax(&logits);
        }
        let ledger = runner.into_engine().into_parts().1;
        let rec = SequenceRecord {
            seed,
            policy: cfg.policy.name(),
            sequence: seq,
            prompt_len: cfg.prompt_len,
            gen_len: cfg.gen_len,
            prefill_reads: ledger.prefill_reads_tokens(),
            record: ledger.record(),
        };
        writeln!(lines, "{}", serde_json::to_string(&rec).map_err(config_err)?).expect("string write");
        merged = Some(match merged {
            None => ledger,
            Some(m) => m.merge(&ledger).map_err(config_err)?,
        });
    }
    let merged = merged.expect("at least one sequence");
    let out = common.out_dir();
    create_dir(&out)?;
    write_file(&out.join("ledger.jsonl"), lines)?;
    let agg = merged.record();
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "seed": seed,
            "policy": cfg.policy.name(),
            "sequences": cfg.sequences,
            "config": cfg,
            "aggregate": agg,
        }),
    )?;
    println!(
        "{}: {} sequences, decode reads {} tokens, peak {} tokens, measured CR {}",
        cfg.policy.name(),
        cfg.sequences,
        agg.reads_total,
        agg.peak_tokens,
        agg.measured_cr.map_or("n/a".to_string(), |c| format!("{c:.4}"))
    );
    Ok(())
}

fn numerical(e: dms_core::kvcache::CacheError) -> CliError {
    match e {
        dms_core::kvcache::CacheError::Numerics(n) => CliError::Numerical(n.to_string()),
        other => CliError::Config(other.to_string()),
    }
}
