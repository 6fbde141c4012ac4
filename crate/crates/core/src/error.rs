use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("{context}: dimension mismatch (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("feature index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("AUC is undefined without at least one positive and one negative label")]
    UndefinedAuc,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("backward pass needs the dropout masks of a train-mode forward pass")]
    MissingDropoutMasks,

    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("bad file: {0}")]
    BadFormat(String),

    #[error("checksum mismatch: file is corrupted")]
    ChecksumMismatch,

    #[error("file is truncated")]
    Truncated,

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn at_path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
