//! Reverse-mode differentiation over dense row-major matrices.
//!
//! Only the operations the network actually uses are provided: affine
//! layers, ReLU, per-feature normalization, segment pooling, kernel point
//! convolution, row gather/concat/interpolation, mean pooling, and MSE.
//! Forward values are f32 with f64 accumulators in every reduction.

mod params;
mod tape;
mod tensor;

pub use params::{sgd_momentum_step, ParameterStore};
pub use tape::{KernelConvGeometry, NormStats, PoolMode, Tape, Var};
pub use tensor::Tensor2D;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
    #[error("duplicate parameter '{0}'")]
    DuplicateParameter(String),
    #[error("missing gradient for parameter '{0}'")]
    MissingGradient(String),
    #[error("empty segment {0} in segment pool")]
    EmptySegment(usize),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
