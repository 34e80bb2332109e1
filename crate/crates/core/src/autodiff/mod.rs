//! Reverse-mode automatic differentiation over dense arrays.
//!
//! Graphs are built per step on a [`Tape`]; every primitive records its
//! inputs and output, and [`Tape::backward`] replays the record in reverse.

mod check;
mod tape;
mod tensor;

pub use check::grad_check;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softplus;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: input outside domain: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must hold a single value, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward root does not depend on anything that requires a gradient")]
    Detached,
}
