use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CmtaError> = std::result::Result<T, E>;

/// Failure modes when decoding a `.cmta` clip or a checkpoint file.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoadError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("malformed header: {0}")]
    Header(String),
}

#[derive(Debug, Error)]
pub enum CmtaError {
    /// Invalid configuration, shape mismatch or contract violation detected
    /// before any numerical work.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: LoadError,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },
}

impl CmtaError {
    pub fn config(msg: impl Into<String>) -> Self {
        CmtaError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CmtaError::Io {
            path: path.into(),
            source,
        }
    }
}
