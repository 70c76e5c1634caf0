//! Dense tensors, matrix kernels and tape-based reverse-mode differentiation.

mod graph;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use graph::Graph;
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{smoothed_cross_entropy, AttnMask, ConvGeom, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero-sized dimension")]
    EmptyShape(Vec<usize>),
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss does not depend on any tensor that requires a gradient")]
    Detached,
    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("{0}")]
    InvalidArgument(String),
}
