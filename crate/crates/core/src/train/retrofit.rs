//! Teacher pretraining and the DMS retrofit loop.

use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::rng::{stream, RandomStream};

use super::corpus::Corpus;
use super::gate::{binarize, logistic_noise, GateMode};
use super::loss::{aux_loss_on_tape, distill_loss, LOG_PROB_FLOOR};
use super::mask::{live_after, EvictionTiming};
use super::model::{ForwardOptions, GateUse, ToyModel};
use super::optim::{Adam, AdamConfig};
use super::schedule::TrainSchedule;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at {phase} step {step}; parameters restored to step {last_good}")]
    NonFinite {
        phase: Phase,
        step: usize,
        last_good: usize,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    /// Neuron-mode pre-phase that fades the borrowed query column.
    Neuron,
    Retrofit,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Neuron => "neuron",
            Phase::Retrofit => "retrofit",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 8,
            seq_len: 256,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrofitConfig {
    /// Retrofit steps after any neuron pre-phase.
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub window: usize,
    pub timing: EvictionTiming,
    pub schedule: TrainSchedule,
    pub adam: AdamConfig,
    /// Held-out windows used by [`evaluate`].
    pub eval_sequences: usize,
}

impl Default for RetrofitConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 8,
            seq_len: 256,
            window: 16,
            timing: EvictionTiming::Delayed,
            schedule: TrainSchedule::default(),
            adam: AdamConfig::default(),
            eval_sequences: 16,
        }
    }
}

impl RetrofitConfig {
    pub fn validate(&self, model: &ToyModel) -> Result<(), TrainError> {
        self.schedule.validate().map_err(TrainError::Config)?;
        check_shape(self.batch, self.seq_len, model)?;
        if self.window == 0 {
            return Err(TrainError::Config("window must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_shape(batch: usize, seq_len: usize, model: &ToyModel) -> Result<(), TrainError> {
    if batch == 0 {
        return Err(TrainError::Config("batch must be >= 1".into()));
    }
    if seq_len < 2 || seq_len > model.cfg.max_seq {
        return Err(TrainError::Config(format!(
            "seq_len {seq_len} outside 2..={}",
            model.cfg.max_seq
        )));
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub phase: Phase,
    pub step: usize,
    /// Distillation loss (cross-entropy during pretraining), batch mean.
    pub loss_d: f64,
    pub loss_aux: f64,
    pub cr_target: f64,
    /// Mean relaxed decision per `[layer][kv_head]`.
    pub alpha_mean: Vec<Vec<f64>>,
    /// Tokens over resident cache entries at the end of each batch sequence
    /// under rounded gates.
    pub realized_cr: f64,
    pub grad_norm: f64,
}

/// Held-out behaviour under rounded gates and exact masking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: usize,
    pub alpha_bin_mean: f64,
    /// `1 / (1 - alpha_bin_mean)`: the ratio once every window has expired.
    pub alpha_cr: f64,
    /// Tokens over resident cache entries at the end of each window.
    pub realized_cr: f64,
    pub distill_loss: f64,
}

/// `1 / (1 - a)` for a mean eviction rate `a`.
pub fn alpha_cr(alpha_mean: f64) -> f64 {
    1.0 / (1.0 - alpha_mean)
}

/// Resident entries summed over heads for rounded decisions `T×H`.
fn resident(decisions: &Tensor, window: usize, timing: EvictionTiming) -> usize {
    (0..decisions.cols())
        .map(|h| {
            let d: Vec<bool> = (0..decisions.rows()).map(|i| decisions.get(i, h) >= 0.5).collect();
            live_after(&d, window, timing)
        })
        .sum()
}

struct Accum {
    grads: Vec<Option<Vec<f64>>>,
}

impl Accum {
    fn new(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    fn add(&mut self, tape: &Tape, root: Var, vars: &[Var], weight: f64) -> Result<(), NumericsError> {
        let g = tape.backward(root)?;
        for (slot, &v) in self.grads.iter_mut().zip(vars) {
            if let Some(raw) = g.raw(v) {
                let acc = slot.get_or_insert_with(|| vec![0.0; raw.len()]);
                for (a, b) in acc.iter_mut().zip(raw) {
                    *a += weight * b;
                }
            }
        }
        Ok(())
    }
}

fn one_hot_targets(tokens: &[usize], vocab: usize) -> Tensor {
    let n = tokens.len() - 1;
    let mut t = Tensor::zeros(&[n, vocab]);
    for (i, &tok) in tokens[1..].iter().enumerate() {
        t.set(i, tok, 1.0);
    }
    t
}

fn sample_batch<'c>(corpus: &'c Corpus, rng: &mut RandomStream, batch: usize, len: usize) -> Result<Vec<&'c [usize]>, TrainError> {
    (0..batch)
        .map(|_| corpus.sample(rng, len).map_err(TrainError::Config))
        .collect()
}

fn apply(
    model: &mut ToyModel,
    opt: &mut Adam,
    acc: Accum,
    phase: Phase,
    step: usize,
    last_good: &mut (usize, Vec<Tensor>),
) -> Result<f64, TrainError> {
    let finite = acc.grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()));
    if !finite {
        return Err(restore(model, phase, step, last_good));
    }
    let gate = |i| model.is_gate_param(i);
    let gate_flags: Vec<bool> = (0..model.params().len()).map(gate).collect();
    let norm = opt.update(model.params_mut(), &acc.grads, |i| gate_flags[i]);
    if model.params().iter().any(|p| !p.is_finite()) {
        return Err(restore(model, phase, step, last_good));
    }
    *last_good = (step + 1, model.params().to_vec());
    Ok(norm)
}

fn restore(model: &mut ToyModel, phase: Phase, step: usize, last_good: &(usize, Vec<Tensor>)) -> TrainError {
    model.params_mut().clone_from_slice(&last_good.1);
    TrainError::NonFinite {
        phase,
        step,
        last_good: last_good.0,
    }
}

/// Next-token cross-entropy training of a dense model. `log` sees every step.
pub fn pretrain(
    model: &mut ToyModel,
    corpus: &Corpus,
    cfg: &PretrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&StepLog),
) -> Result<(), TrainError> {
    check_shape(cfg.batch, cfg.seq_len, model)?;
    let mut rng = stream(seed, "pretrain/batch");
    let mut opt = Adam::new(cfg.adam, model.params());
    let mut last_good = (0, model.params().to_vec());
    for step in 0..cfg.steps {
        let batch = sample_batch(corpus, &mut rng, cfg.batch, cfg.seq_len)?;
        let mut acc = Accum::new(model.params().len());
        let mut loss = 0.0;
        for seq in &batch {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let out = model.forward(&mut tape, &vars, seq, &ForwardOptions::dense())?;
            let pred = tape.slice_rows(out.logits, 0, seq.len() - 1)?;
            let ce = tape.kl_div(pred, &one_hot_targets(seq, model.cfg.vocab), LOG_PROB_FLOOR)?;
            let value = tape.value(ce).item();
            if !value.is_finite() {
                return Err(restore(model, Phase::Pretrain, step, &last_good));
            }
            loss += value / cfg.batch as f64;
            acc.add(&tape, ce, &vars, 1.0 / cfg.batch as f64)?;
        }
        let grad_norm = apply(model, &mut opt, acc, Phase::Pretrain, step, &mut last_good)?;
        log(&StepLog {
            phase: Phase::Pretrain,
            step,
            loss_d: loss,
            loss_aux: 0.0,
            cr_target: 1.0,
            alpha_mean: Vec::new(),
            realized_cr: 1.0,
            grad_norm,
        });
    }
    Ok(())
}

fn frozen_noise(rng: &mut RandomStream, layers: usize, t: usize, heads: usize) -> Vec<Tensor> {
    (0..layers)
        .map(|_| Tensor::new(vec![t, heads], (0..t * heads).map(|_| logistic_noise(rng)).collect()).expect("noise shape"))
        .collect()
}

/// Outcome of [`retrofit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrofitSummary {
    pub neuron_steps: usize,
    pub retrofit_steps: usize,
    pub eval: EvalReport,
}

/// Distils `teacher` into `student` while annealing the eviction rate
/// towards `1 - 1/final_cr`. Neuron-mode students first run
/// `schedule.neuron_horizon` distillation-only steps that fade the
/// borrowed query column to zero.
pub fn retrofit(
    student: &mut ToyModel,
    teacher: &ToyModel,
    corpus: &Corpus,
    cfg: &RetrofitConfig,
    seed: u64,
    log: &mut dyn FnMut(&StepLog),
) -> Result<RetrofitSummary, TrainError> {
    cfg.validate(student)?;
    if student.cfg != teacher.cfg {
        return Err(TrainError::Config("teacher and student shapes differ".into()));
    }
    let att = student.cfg.attention();
    let (layers, heads) = (student.cfg.n_layers, att.n_kv_heads);
    let mut batch_rng = stream(seed, "retrofit/batch");
    let mut opt = Adam::new(cfg.adam, student.params());
    let mut last_good = (0, student.params().to_vec());
    if student.params().iter().any(|p| !p.is_finite()) {
        return Err(restore(student, Phase::Retrofit, 0, &last_good));
    }
    let neuron_steps = if student.gate_mode == GateMode::Neuron {
        cfg.schedule.neuron_horizon
    } else {
        0
    };

    for step in 0..neuron_steps + cfg.steps {
        let (phase, local) = if step < neuron_steps {
            (Phase::Neuron, step)
        } else {
            (Phase::Retrofit, step - neuron_steps)
        };
        let target = if phase == Phase::Retrofit {
            cfg.schedule.alpha_target(local)
        } else {
            0.0
        };
        let mut noise_rng = stream(seed, &format!("retrofit/noise/{step}"));
        let batch = sample_batch(corpus, &mut batch_rng, cfg.batch, cfg.seq_len)?;
        let mut acc = Accum::new(student.params().len());
        let bw = 1.0 / cfg.batch as f64;
        let (mut ld, mut la) = (0.0, 0.0);
        let mut alpha_sum = vec![vec![0.0; heads]; layers];
        let (mut live, mut entries) = (0usize, 0usize);
        for seq in &batch {
            let t = seq.len();
            let teacher_probs = crate::numerics::softmax_rows(&teacher.logits(seq)?)?;
            let mut tape = Tape::new();
            let vars = student.bind(&mut tape);
            let opts = match phase {
                Phase::Neuron => ForwardOptions {
                    gate: GateUse::Off,
                    neuron_scale: Some(cfg.schedule.neuron_scale(local)),
                },
                _ => ForwardOptions::with_gate(GateUse::Sampled {
                    noise: frozen_noise(&mut noise_rng, layers, t, heads),
                    window: cfg.window,
                    timing: cfg.timing,
                }),
            };
            let out = student.forward(&mut tape, &vars, seq, &opts)?;
            let kl = tape.kl_div(out.logits, &teacher_probs, LOG_PROB_FLOOR)?;
            let root = if out.alphas.is_empty() {
                kl
            } else {
                let aux = aux_loss_on_tape(&mut tape, &out.alphas, target);
                la += tape.value(aux).item() * bw;
                tape.add(kl, aux)?
            };
            let value = tape.value(root).item();
            if !value.is_finite() {
                return Err(restore(student, phase, step, &last_good));
            }
            ld += tape.value(kl).item() * bw;
            for (l, &a) in out.alphas.iter().enumerate() {
                let a = tape.value(a);
                for (g, s) in alpha_sum[l].iter_mut().enumerate() {
                    *s += (0..t).map(|i| a.get(i, g)).sum::<f64>();
                }
            }
            for &lg in &out.gate_logits {
                let z = tape.value(lg);
                let rounded = Tensor::new(
                    z.shape().to_vec(),
                    z.data().iter().map(|&x| if binarize(x) { 1.0 } else { 0.0 }).collect(),
                )?;
                live += resident(&rounded, cfg.window, cfg.timing);
                entries += z.numel();
            }
            acc.add(&tape, root, &vars, bw)?;
        }
        let grad_norm = apply(student, &mut opt, acc, phase, step, &mut last_good)?;
        let denom = (cfg.batch * cfg.seq_len) as f64;
        log(&StepLog {
            phase,
            step,
            loss_d: ld,
            loss_aux: la,
            cr_target: 1.0 / (1.0 - target),
            alpha_mean: if phase == Phase::Retrofit {
                alpha_sum.into_iter().map(|r| r.into_iter().map(|s| s / denom).collect()).collect()
            } else {
                Vec::new()
            },
            realized_cr: if live == 0 { 1.0 } else { entries as f64 / live as f64 },
            grad_norm,
        });
    }
    let eval = evaluate(student, teacher, corpus, cfg.window, cfg.timing, cfg.seq_len, cfg.eval_sequences)?;
    Ok(RetrofitSummary {
        neuron_steps,
        retrofit_steps: cfg.steps,
        eval,
    })
}

/// Distillation loss and realized compression of `student` on held-out
/// windows with rounded gates and exact masking.
pub fn evaluate(
    student: &ToyModel,
    teacher: &ToyModel,
    corpus: &Corpus,
    window: usize,
    timing: EvictionTiming,
    seq_len: usize,
    max_sequences: usize,
) -> Result<EvalReport, TrainError> {
    let seqs = corpus.heldout(seq_len, max_sequences);
    if seqs.is_empty() {
        return Err(TrainError::Config(format!("no held-out window of length {seq_len}")));
    }
    let (mut loss, mut bin, mut count, mut live) = (0.0, 0.0, 0usize, 0usize);
    for seq in &seqs {
        let teacher_logits = teacher.logits(seq)?;
        let mut tape = Tape::new();
        let vars = student.bind(&mut tape);
        let out = student.forward(&mut tape, &vars, seq, &ForwardOptions::with_gate(GateUse::Binary { window, timing }))?;
        loss += distill_loss(tape.value(out.logits), &teacher_logits)?;
        for &a in &out.alphas {
            let a = tape.value(a);
            bin += a.sum();
            count += a.numel();
            live += resident(a, window, timing);
        }
    }
    let n = seqs.len();
    let alpha_bin_mean = if count == 0 { 0.0 } else { bin / count as f64 };
    Ok(EvalReport {
        sequences: n,
        alpha_bin_mean,
        alpha_cr: alpha_cr(alpha_bin_mean),
        realized_cr: if live == 0 { 1.0 } else { count as f64 / live as f64 },
        distill_loss: loss / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::corpus::{synthetic_corpus, SyntheticSpec};
    use crate::train::ModelConfig;

    fn tiny() -> (ToyModel, Corpus) {
        let cfg = ModelConfig {
            vocab: 256,
            d_model: 16,
            n_layers: 1,
            n_q_heads: 2,
            n_kv_heads: 1,
            d_ff: 32,
            max_seq: 32,
        };
        let spec = SyntheticSpec {
            documents: 20,
            doc_len: 32,
            min_distance: 4,
            max_distance: 20,
            ..SyntheticSpec::default()
        };
        let bytes = synthetic_corpus(&spec, &mut stream(1, "corpus"));
        let m = ToyModel::new(cfg, GateMode::Vector, &mut stream(1, "init")).unwrap();
        (m, Corpus::from_bytes(&bytes, 32, 0.1).unwrap())
    }

    fn rcfg(steps: usize) -> RetrofitConfig {
        RetrofitConfig {
            steps,
            batch: 2,
            seq_len: 32,
            window: 4,
            eval_sequences: 2,
            schedule: TrainSchedule {
                steps_per_cr: 2,
                ..TrainSchedule::default()
            },
            ..RetrofitConfig::default()
        }
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let (teacher, corpus) = tiny();
        let mut student = teacher.clone();
        let s = retrofit(&mut student, &teacher, &corpus, &rcfg(0), 5, &mut |_| {}).unwrap();
        assert_eq!(student, teacher);
        assert_eq!(s.retrofit_steps, 0);
        assert_eq!(s.eval.realized_cr, 1.0);
        assert!(s.eval.distill_loss.abs() < 1e-12);
    }

    #[test]
    fn pretraining_lowers_cross_entropy() {
        let (mut m, corpus) = tiny();
        let mut losses = Vec::new();
        let cfg = PretrainConfig {
            steps: 30,
            batch: 2,
            seq_len: 32,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
        };
        pretrain(&mut m, &corpus, &cfg, 2, &mut |s| losses.push(s.loss_d)).unwrap();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[25..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn retrofit_logs_every_step_and_raises_eviction() {
        let (teacher, corpus) = tiny();
        let mut student = teacher.clone();
        let mut logs = Vec::new();
        let mut cfg = rcfg(12);
        cfg.adam.gate_lr = 0.3;
        retrofit(&mut student, &teacher, &corpus, &cfg, 3, &mut |s| logs.push(s.clone())).unwrap();
        assert_eq!(logs.len(), 12);
        assert_eq!(logs[0].alpha_mean.len(), 1);
        assert_eq!(logs[11].cr_target, 4.0);
        let first = logs[0].alpha_mean[0][0];
        let last = logs[11].alpha_mean[0][0];
        assert!(last > first, "{first} -> {last}");
    }

    #[test]
    fn neuron_mode_runs_fade_phase_first() {
        let (t, corpus) = tiny();
        let teacher = ToyModel::from_parts(t.cfg, GateMode::Neuron, t.gate_bias, t.tau, t.names().iter().cloned().zip(t.params().iter().cloned()).collect()).unwrap();
        let mut student = teacher.clone();
        let mut cfg = rcfg(2);
        cfg.schedule.neuron_horizon = 3;
        let mut phases = Vec::new();
        let s = retrofit(&mut student, &teacher, &corpus, &cfg, 3, &mut |l| phases.push(l.phase)).unwrap();
        assert_eq!(s.neuron_steps, 3);
        assert_eq!(phases, [Phase::Neuron, Phase::Neuron, Phase::Neuron, Phase::Retrofit, Phase::Retrofit]);
    }

    #[test]
    fn non_finite_loss_restores_parameters() {
        let (teacher, corpus) = tiny();
        let mut student = teacher.clone();
        student.params_mut()[1].data_mut()[0] = f64::NAN;
        let before = student.params().to_vec();
        let err = retrofit(&mut student, &teacher, &corpus, &rcfg(3), 3, &mut |_| {}).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { step: 0, .. }), "{err}");
        assert_eq!(format!("{:?}", student.params()), format!("{before:?}"));
    }
}
