use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported audio: {0}")]
    Audio(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parseable tag, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NonFinite(_) => "non-finite",
            Error::Divergence { .. } => "divergence",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Audio(_) => "audio",
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
        }
    }
}
