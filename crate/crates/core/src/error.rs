//! Crate-wide error type.
//!
//! Variants are grouped so callers can tell configuration mistakes
//! (bad shapes, bad arguments) apart from IO trouble and from numerical
//! breakdown (non-finite values) without string matching.

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All errors produced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation received an empty collection where at least one
    /// element is required.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Tensor or matrix extents do not line up for the requested
    /// operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A scalar argument or configuration value is out of range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation produced NaN or infinity where a finite value is
    /// required (e.g. a training loss).
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A required file or directory does not exist.
    #[error("missing path: {0}")]
    MissingPath(PathBuf),

    /// A file exists but its contents do not match the expected format.
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// An underlying IO operation failed.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// An image file could not be decoded or encoded.
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    /// Wraps an IO error together with the path it concerns.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Wraps an image codec error together with the path it concerns.
    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }

    /// Builds a [`Error::Format`] for `path`.
    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
