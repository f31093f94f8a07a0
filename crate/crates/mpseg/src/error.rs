//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor, slice, or volume dimensions do not match what an operation requires.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A numerical or geometric parameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A configuration value (network layout, run config) is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A required input file is missing.
    #[error("missing input: {0}")]
    MissingInput(PathBuf),

    /// A file header could not be parsed.
    #[error("malformed header in {path}: {msg}")]
    MalformedHeader { path: PathBuf, msg: String },

    /// A payload is shorter than its header declares.
    #[error("truncated payload in {path}: expected {expected} bytes, got {got}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        got: usize,
    },

    /// An element type the reader does not support.
    #[error("unsupported element type in {path}: {ty}")]
    UnsupportedElementType { path: PathBuf, ty: String },

    /// Data violates a domain invariant (label range, probability normalization, ...).
    #[error("validation: {0}")]
    Validation(String),

    /// A forward or backward operation produced NaN or Inf.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// Training loss became non-finite.
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
