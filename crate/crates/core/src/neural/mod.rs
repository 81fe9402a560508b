//! Small dense tensor engine with tape-based reverse-mode differentiation.
//!
//! Every forward op appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! tape in reverse creation order, which is a valid reverse topological order
//! because a node can only reference nodes created before it.

mod adam;
pub mod checkpoint;
mod conv;
mod gradcheck;
pub mod layers;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::Scalar;
pub(crate) use scalar::{gemm, MatView};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss does not depend on any tensor that requires grad")]
    Detached,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
