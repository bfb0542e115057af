//! Error taxonomy shared across the crate.
//!
//! Variants are grouped by what the caller can do about them: `Shape`,
//! `Domain`, `Bounds` and `Contract` indicate misuse of the numeric API,
//! `Config` indicates a bad run configuration, `Format` and `Io` indicate
//! problems with files on disk, and `NonFinite` is the training abort signal.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes that do not fit the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid run configuration (bad value, unknown key, inconsistent sizes).
    #[error("configuration error: {0}")]
    Config(String),

    /// An input value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An index outside a tensor, image, or view collection.
    #[error("out of bounds: {0}")]
    Bounds(String),

    /// API misuse, e.g. calling backward on a non-scalar output.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed on-disk data: checkpoints, datasets, or images.
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss and stopped.
    #[error("non-finite loss at step {step}; aborting")]
    NonFinite { step: u64 },

    /// Filesystem failure, annotated with the path that caused it.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
