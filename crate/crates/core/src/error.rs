use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in layer `{layer}`")]
    NonFinite { layer: String },

    #[error("no entries: {0}")]
    Empty(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("misaligned parameter sets: {0}")]
    Misaligned(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("corrupt checkpoint at {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("epoch {epoch}, task {task}: {source}")]
    Training {
        epoch: usize,
        task: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. } => ErrorCategory::Io,
            Error::NotFound(_) => ErrorCategory::NotFound,
            Error::Corrupt { .. } => ErrorCategory::Corrupt,
            Error::Config(_) => ErrorCategory::Config,
            Error::Training { source, .. } => source.category(),
            _ => ErrorCategory::Invalid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    NotFound,
    Corrupt,
    Invalid,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Io => 3,
            ErrorCategory::NotFound => 4,
            ErrorCategory::Corrupt => 5,
            ErrorCategory::Invalid => 6,
        }
    }
}
