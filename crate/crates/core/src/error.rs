use std::io;

use thiserror::Error;

/// Errors produced by the attention engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("block size error: {0}")]
    BlockSize(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("query block {row} retains no key block")]
    EmptyRow { row: usize },

    #[error("reallocation denominator is zero in row {row}")]
    DegenerateRow { row: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("token grid dimensions are required for reordering")]
    MissingGrid,

    #[error("reference is all zero")]
    ZeroReference,

    #[error("vector has zero norm")]
    ZeroVector,

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
