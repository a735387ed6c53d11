//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on shape. Both shapes are always reported.
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A single operand has an unusable shape.
    #[error("{op}: invalid shape {shape:?} ({why})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        why: String,
    },

    #[error("non-finite values encountered in {op}")]
    NonFinite { op: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("format error in {path}: {why}")]
    Format { path: String, why: String },

    #[error("checksum mismatch for {path}")]
    Checksum { path: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
