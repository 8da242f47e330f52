//! Minimal reverse-mode differentiation over dense arrays.
//!
//! Values live in a [`Graph`] and are addressed through [`Var`] handles.
//! Parameters enter a graph as leaves with `requires_grad`; after
//! [`Graph::backward`] their `grad` holds the derivative of the loss.
//! Broadcasting is limited to [`Graph::add_bias`] and scalar scaling; every
//! other shape disagreement is an error naming both shapes.

mod graph;
pub mod kernels;
mod shape;

use alloc::string::String;
use alloc::vec::Vec;

pub use graph::{DiffValue, Graph, OpKind, Var};
pub use shape::{Shape, MAX_RANK};

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("invalid shape {dims:?}: rank must be 1..=4 and every extent at least 1")]
    InvalidShape { dims: Vec<usize> },
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch { op: &'static str, left: Shape, right: Shape },
    #[error("data length {len} does not match shape {shape}")]
    DataLength { shape: Shape, len: usize },
    #[error("log of non-positive value {value} at index {index}")]
    NonPositiveLog { index: usize, value: f64 },
    #[error("cosine similarity of a zero-norm embedding")]
    ZeroEmbedding,
    #[error("backward needs a scalar loss, got shape {0}")]
    NotScalar(Shape),
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
