//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Tape`] records primitives in execution order together with their
//! outputs; [`Tape::backward`] walks the record once in reverse. Primitives
//! are coarse (a whole linear layer, a batch of exponential maps, the
//! hyperbolic MLR, the fused losses) so a training step records a dozen
//! nodes rather than one per scalar.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use tape::{forward, Gradients, Recording, Tape, UnaryOp, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    Length { shape: Vec<usize>, len: usize },
    #[error("non-finite tensor entry at flat index {0}")]
    NonFinite(usize),
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("variable {0} does not belong to this tape")]
    ForeignVar(usize),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> DiffError {
    DiffError::Shape {
        op,
        detail: detail.into(),
    }
}
