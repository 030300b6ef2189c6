//! Error taxonomy shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad counts, bad ranges, unknown switches).
    #[error("configuration error: {0}")]
    Config(String),

    /// Problems with datasets, manifests, or episode sampling.
    #[error("data error: {0}")]
    Data(String),

    /// Tensor/array shape mismatches.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values or numerically invalid inputs.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint serialization/deserialization failures.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Failures raised while running an optimization step or a full fit.
    #[error("training error: {0}")]
    Training(String),

    /// Evaluation protocol violations (empty test sets, missing categories).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// API misuse (empty inputs, out-of-range labels).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error at {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
