use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("malformed header in {path}: {detail}")]
    MalformedHeader { path: PathBuf, detail: String },

    #[error("payload length disagrees with shape in {path}: shape needs {expected} bytes, found {found}")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("malformed checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("failed to load sample `{sample}`: {source}")]
    Sample {
        sample: String,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite values in `{0}`")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::InvalidArgument(_) => "E_ARG",
            Error::Config(_) => "E_CONFIG",
            Error::TruncatedPayload { .. } => "E_TRUNCATED",
            Error::MalformedHeader { .. } => "E_HEADER",
            Error::LengthMismatch { .. } => "E_LENGTH",
            Error::Checkpoint { .. } => "E_CHECKPOINT",
            Error::Sample { .. } => "E_SAMPLE",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::Io { .. } => "E_IO",
            Error::Parse { .. } => "E_PARSE",
        }
    }
}
