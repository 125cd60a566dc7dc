//! Retrofitting a toy transformer with learned delayed eviction.

pub mod checkpoint;
pub mod corpus;
pub mod gate;
pub mod loss;
pub mod mask;
pub mod model;
pub mod optim;
pub mod retrofit;
pub mod schedule;

pub use gate::{
    binarize, logistic_noise, relaxed_gate, relaxed_gate_grad, sample_gate, GateMode, GateParams,
    DEFAULT_GATE_BIAS, DEFAULT_TAU,
};
pub use loss::{aux_loss, aux_loss_on_tape, distill_loss, LOG_PROB_FLOOR};
pub use mask::{build_mask, live_after, EvictionTiming, MaskError, MaskSpec};
pub use model::{ForwardOptions, ForwardOutput, GateUse, ModelConfig, ToyModel};
pub use schedule::{ScheduleState, TrainSchedule};
pub use corpus::{synthetic_corpus, Corpus, SyntheticSpec};
pub use optim::{Adam, AdamConfig};
pub use retrofit::{
    alpha_cr, evaluate, pretrain, retrofit, EvalReport, Phase, PretrainConfig, RetrofitConfig, RetrofitSummary,
    StepLog, TrainError,
};
