use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dms_core::rng::stream;
use dms_core::train::checkpoint;
use dms_core::train::{
    pretrain, retrofit, synthetic_corpus, Corpus, GateMode, ModelConfig, PretrainConfig, RetrofitConfig, StepLog,
    SyntheticSpec, ToyModel, TrainError,
};

use crate::{config_err, create_dir, load_config, write_file, write_json, CliError, Common};

/// Where training text comes from. Without `path` a synthetic corpus is
/// generated from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Window starts are multiples of this many bytes.
    pub align: usize,
    pub holdout: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: SyntheticSpec::default(),
            align: 256,
            holdout: 0.1,
        }
    }
}

impl CorpusConfig {
    pub fn load(&self, seed: u64) -> Result<Corpus, CliError> {
        let bytes = match &self.path {
            Some(p) => std::fs::read(p).map_err(|e| CliError::Config(format!("corpus.path {}: {e}", p.display())))?,
            None => {
                self.synthetic.validate().map_err(|e| CliError::Config(format!("corpus.synthetic: {e}")))?;
                synthetic_corpus(&self.synthetic, &mut stream(seed, "corpus"))
            }
        };
        Corpus::from_bytes(&bytes, self.align, self.holdout).map_err(|e| CliError::Config(format!("corpus: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub gate_mode: GateMode,
    pub gate_bias: f64,
    pub tau: f64,
    /// Existing teacher checkpoint directory; pretrains one when absent.
    pub teacher: Option<PathBuf>,
    pub pretrain: PretrainConfig,
    pub retrofit: RetrofitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            gate_mode: GateMode::Vector,
            gate_bias: dms_core::train::DEFAULT_GATE_BIAS,
            tau: dms_core::train::DEFAULT_TAU,
            teacher: None,
            pretrain: PretrainConfig::default(),
            retrofit: RetrofitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        if !(self.tau > 0.0) {
            return Err(CliError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !self.gate_bias.is_finite() {
            return Err(CliError::Config("gate_bias must be finite".into()));
        }
        if self.corpus.align == 0 {
            return Err(CliError::Config("corpus.align must be >= 1".into()));
        }
        if self.model.vocab < 256 {
            return Err(CliError::Config(format!("model.vocab must be >= 256 for byte tokens, got {}", self.model.vocab)));
        }
        let r = &self.retrofit;
        let check = |name: &str, batch: usize, len: usize| -> Result<(), CliError> {
            if batch == 0 {
                return Err(CliError::Config(format!("{name}.batch must be >= 1")));
            }
            if len < 2 || len > self.model.max_seq {
                return Err(CliError::Config(format!(
                    "{name}.seq_len must be in 2..={}, got {len}",
                    self.model.max_seq
                )));
            }
            Ok(())
        };
        check("retrofit", r.batch, r.seq_len)?;
        if self.teacher.is_none() {
            check("pretrain", self.pretrain.batch, self.pretrain.seq_len)?;
        }
        if r.window == 0 {
            return Err(CliError::Config("retrofit.window must be >= 1".into()));
        }
        if r.schedule.steps_per_cr == 0 {
            return Err(CliError::Config("retrofit.schedule.steps_per_cr must be >= 1".into()));
        }
        if !(r.schedule.final_cr >= 1.0) {
            return Err(CliError::Config(format!(
                "retrofit.schedule.final_cr must be >= 1, got {}",
                r.schedule.final_cr
            )));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Header<'a> {
    header: bool,
    command: &'static str,
    seed: u64,
    config: &'a TrainConfig,
}

struct Log {
    out: BufWriter<File>,
    path: PathBuf,
}

impl Log {
    fn create(path: PathBuf) -> Result<Self, CliError> {
        let f = File::create(&path).map_err(|e| CliError::Config(format!("cannot create {}: {e}", path.display())))?;
        Ok(Self {
            out: BufWriter::new(f),
            path,
        })
    }

    fn line(&mut self, v: &impl Serialize) -> Result<(), CliError> {
        let s = serde_json::to_string(v).map_err(config_err)?;
        writeln!(self.out, "{s}").map_err(|e| CliError::Config(format!("{}: {e}", self.path.display())))
    }

    fn flush(&mut self) {
        let _ = self.out.flush();
    }
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(m) => CliError::Config(m),
        other => CliError::Numerical(other.to_string()),
    }
}

fn save(dir: &Path, model: &ToyModel, seed: u64, meta: serde_json::Value) -> Result<(), CliError> {
    checkpoint::save(dir, model, seed, meta).map(|_| ()).map_err(config_err)
}

pub(crate) fn run(common: &Common) -> Result<(), CliError> {
    let mut cfg: TrainConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.policy.is_some() || common.profile.is_some() {
        return Err(CliError::Config("train takes no --policy or --profile".into()));
    }
    cfg.validate()?;
    let seed = cfg.seed;
    let corpus = cfg.corpus.load(seed)?;
    let out = common.out_dir();
    create_dir(&out)?;

    let mut log = Log::create(out.join("train_log.jsonl"))?;
    log.line(&Header {
        header: true,
        command: "train",
        seed,
        config: &cfg,
    })?;
    let mut write_err = None;
    let mut sink = |s: &StepLog| {
        if let Err(e) = log.line(s) {
            write_err.get_or_insert(e);
        }
    };

    let teacher = match &cfg.teacher {
        Some(dir) => {
            let (t, _) = checkpoint::load(dir).map_err(|e| CliError::Config(format!("teacher: {e}")))?;
            if t.cfg != cfg.model {
                return Err(CliError::Config("teacher checkpoint model shape differs from model config".into()));
            }
            t
        }
        None => {
            let mut t = ToyModel::new(cfg.model, cfg.gate_mode, &mut stream(seed, "model/init")).map_err(CliError::Config)?;
            t.gate_bias = cfg.gate_bias;
            t.tau = cfg.tau;
            let res = pretrain(&mut t, &corpus, &cfg.pretrain, seed, &mut sink);
            if let Err(e) = res {
                drop(sink);
                log.flush();
                save(&out.join("teacher"), &t, seed, serde_json::json!({"status": "non-finite"}))?;
                return Err(train_error(e));
            }
            save(&out.join("teacher"), &t, seed, serde_json::json!({"role": "teacher", "steps": cfg.pretrain.steps}))?;
            t
        }
    };
    let mut student =
        ToyModel::from_parts(cfg.model, cfg.gate_mode, cfg.gate_bias, cfg.tau, teacher.names().iter().cloned().zip(teacher.params().iter().cloned()).collect())
            .map_err(CliError::Config)?;
    let res = retrofit(&mut student, &teacher, &corpus, &cfg.retrofit, seed, &mut sink);
    drop(sink);
    log.flush();
    if let Some(e) = write_err {
        return Err(e);
    }
    match res {
        Ok(summary) => {
            save(&out.join("checkpoint"), &student, seed, serde_json::json!({"role": "student", "summary": summary}))?;
            write_json(
                &out.join("summary.json"),
                &serde_json::json!({"seed": seed, "status": "ok", "summary": summary}),
            )?;
            let e = &summary.eval;
            println!(
                "held-out realized CR {:.4} (alpha {:.4}, alpha CR {:.4}), distillation loss {:.6} over {} windows",
                e.realized_cr, e.alpha_bin_mean, e.alpha_cr, e.distill_loss, e.sequences
            );
            Ok(())
        }
        Err(e) => {
            let err = train_error(e);
            save(&out.join("checkpoint"), &student, seed, serde_json::json!({"role": "student", "status": "last-good"}))?;
            write_file(
                &out.join("summary.json"),
                serde_json::to_string_pretty(&serde_json::json!({"seed": seed, "status": "failed", "error": err.to_string()})).map_err(config_err)?
                    + "\n",
            )?;
            Err(err)
        }
    }
}
