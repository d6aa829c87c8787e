//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        context: String,
        expected: [usize; 3],
        got: [usize; 3],
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid label {label} at voxel {at:?} (valid labels are 0..=3)")]
    InvalidLabel { label: i64, at: [usize; 3] },

    #[error("architecture error: {0}")]
    Architecture(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    TrainingDiverged { epoch: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported file format: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
