//! Deterministic reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it runs; [`Graph::backward`] walks
//! the record in reverse and returns one gradient per entry of the
//! [`ParameterSet`] the graph was fed from. Recurrent cells, Gaussian
//! likelihood helpers, an Adam optimizer and a binary snapshot format sit on
//! top of the tape.

pub mod adam;
pub mod cells;
pub mod check;
mod conv;
pub mod gaussian;
pub mod graph;
pub mod layers;
pub mod params;
pub mod rng;
pub mod snapshot;
pub mod tensor;

pub use adam::Adam;
pub use graph::{Graph, Var};
pub use params::{Gradients, ParameterSet};
pub use tensor::Tensor;

/// Lower and upper clamp applied to every log-variance head before it is
/// exponentiated.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 5.0;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("malformed snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> DiffError {
    DiffError::Shape { op, detail: detail.into() }
}
