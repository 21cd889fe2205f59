//! Minimal reverse-mode autodiff over dense f64 matrices.
//!
//! Everything downstream (the transformer, the editors, the meta-training
//! loop) is written against [`Tensor`] and [`Tape`]. The tape is define-by-run:
//! ops execute eagerly, record themselves when any input is tracked, and a
//! backward sweep fills per-node gradient buffers. Gradients of intermediate
//! nodes stay queryable after the sweep — the editing machinery reads
//! per-layer input/output gradients directly off the tape.

mod fd;
mod tape;
mod tensor;

pub use fd::finite_difference_gradient;
pub use tape::Tape;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

pub(crate) use tape::{sigmoid, softplus};
