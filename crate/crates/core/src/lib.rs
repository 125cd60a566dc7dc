//! Toy-scale laboratory for delayed-eviction KV-cache sparsification.
//!
//! * [`numerics`] – tensors and reverse-mode autodiff.
//! * [`attention`] – grouped-query causal attention with an additive eviction mask.
//! * [`train`] – gate sampling, mask construction, losses, schedules and the retrofit loop.
//! * [`kvcache`] – per-head paged KV cache executing delayed eviction, with read accounting.
//! * [`baselines`] – TOVA, H2O, Quest, DMC-lite and immediate eviction behind one policy enum.
//! * [`costmodel`] – analytical FLOPs / HBM reads / latency estimates.
//! * [`hyperscale`] – budget sweeps, aggregation, Pareto frontiers and average improvement.
//! * [`verify`] – brute-force oracles for the attention, gradient and policy paths.

pub mod attention;
pub mod baselines;
pub mod costmodel;
pub mod hyperscale;
pub mod kvcache;
pub mod numerics;
pub mod rng;
pub mod train;
pub mod verify;

pub use attention::{AttentionConfig, ProjectionSet};
pub use baselines::PolicyKind;
pub use costmodel::{CostReport, ModelProfile};
pub use hyperscale::{BudgetConfig, FrontierPoint};
pub use kvcache::{PagedKVCache, ReadLedger};
pub use numerics::{Tape, Tensor, Var};
pub use train::{GateParams, MaskSpec, TrainSchedule};
