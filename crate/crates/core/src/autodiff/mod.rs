//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Each primitive call
//! evaluates its value eagerly and records enough information to
//! propagate gradients back in reverse recording order. Leaves created from
//! tensors flagged with `requires_grad` receive gradients in
//! [`Gradients`].
//!
//! Broadcasting is restricted to scalar operands, trailing-suffix operands
//! (a bias row added to every row) and a last-axis extent of one (a
//! per-row scale).

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckReport};
pub use tape::{Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: index {index} out of bounds for extent {len}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: invalid axis {axis} for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value {value} at coordinate {index}")]
    NonFinite { index: usize, value: f64 },
}
