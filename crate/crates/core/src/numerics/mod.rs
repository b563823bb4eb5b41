//! Dense tensor arithmetic with reverse-mode differentiation.
//!
//! Everything that touches raw floating point lives here: the [`Tensor`]
//! storage type, the eager [`Graph`] that records executed operations for a
//! single reverse sweep, trainable [`Parameter`] slots, and the seeded
//! [`RunRng`] used by every stochastic operation.

pub mod check;
mod graph;
mod rng;
mod tensor;

#[cfg(test)]
pub(crate) use graph::matmul_into;
pub use graph::{Graph, Parameter, ValueId};
pub use rng::RunRng;
pub use tensor::{precision, quantize_all, set_precision, Precision, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} holds {expected} values, got {actual}")]
    BadLength {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for shape {shape:?}")]
    BadIndex {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        op: &'static str,
        label: usize,
        classes: usize,
    },
    #[error("dropout probability {p} outside [0, 1)")]
    BadProbability { p: f64 },
    #[error("backward target must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward already ran on this graph")]
    GraphConsumed,
    #[error("{op}: operand does not belong to this graph")]
    ForeignValue { op: &'static str },
}
