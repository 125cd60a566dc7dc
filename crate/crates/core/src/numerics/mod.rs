//! Dense `f64` tensors and a reverse-mode tape, just enough to train the toy
//! transformer. Row-major storage, left-to-right summation.

mod tape;
mod tensor;

pub use tape::{EvictionMaskSpec, Gradients, MaskMode, Tape, Var, ALPHA_CLAMP};
pub use tensor::{dot, log_softmax_rows, matmul, matmul_nt, softmax_rows, Tensor};

pub(crate) use tape::{eviction_offset, gelu, kl_rows, sigmoid};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects a matrix, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("expected a square matrix, got {shape:?}")]
    NotSquare { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("row {row} has length {len}, expected {expected}")]
    RaggedRows { row: usize, len: usize, expected: usize },
    #[error("softmax row {row} has no visible entry")]
    EmptyRow { row: usize },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0}")]
    Invalid(String),
}
