//! Deterministic reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in execution order. Parameters are
//! bound from a [`Params`] store by name, and [`Graph::backward`] returns
//! gradients for every trainable leaf. Everything is single-threaded and
//! reproducible: the same graph always yields bitwise identical gradients.

mod check;
mod graph;
mod params;
mod scalar;
mod value;

pub use check::{grad_check, grad_check_params, relative_error};
pub use graph::{ConvGeometry, Gradients, Graph, Var};
pub use params::Params;
pub use scalar::Scalar;
pub use value::{broadcast_shape, Mask, Tensor};

pub(crate) use graph::sigmoid;

#[cfg(test)]
mod tests;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    Length { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} invalid for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: slice is entirely -inf, distribution undefined")]
    AllMasked { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` not found")]
    MissingParam(String),
    #[error("{0}")]
    Validation(String),
}
