use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {dims:?}: {reason}")]
    InvalidShape { dims: Vec<usize>, reason: &'static str },

    #[error("shape {shape} holds {} elements but {len} values were given", shape.numel())]
    DataLength { shape: Shape, len: usize },

    #[error("{op}: dimension mismatch between {left} and {right}")]
    Dimension {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: expected {expected}, got shape {shape}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        shape: Shape,
    },

    #[error("{op}: id {id} is outside the vocabulary of size {vocab}")]
    Vocabulary { op: &'static str, id: usize, vocab: usize },

    #[error("masked_cross_entropy: the loss mask selects no positions")]
    DegenerateBatch,

    #[error("{op}: {reason}")]
    Argument { op: &'static str, reason: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
