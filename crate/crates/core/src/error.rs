use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the composition toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("timestep {t} outside [0, {max}]")]
    Range { t: i64, max: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error at `{key}`: {message}")]
    Validation { key: String, message: String },

    /// The exclusion mask removed every key/value token.
    #[error("empty attention context: mask covers entire image ({0})")]
    EmptyContext(String),

    #[error("absent cache entry: {0}")]
    AbsentEntry(String),

    #[error("backend capability missing: {0}")]
    Capability(String),

    #[error("logic error: {0}")]
    Logic(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn validation(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// a failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Validation { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
