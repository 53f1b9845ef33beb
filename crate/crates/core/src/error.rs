use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PqkError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PqkError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("phase error: {0}")]
    Phase(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("corrupted checkpoint: {0}")]
    Corrupt(String),

    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PqkError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        PqkError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        PqkError::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        PqkError::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PqkError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            PqkError::Config(_) | PqkError::Phase(_) | PqkError::Shape(_) => 2,
            PqkError::Data(_)
            | PqkError::Format { .. }
            | PqkError::Corrupt(_)
            | PqkError::Io { .. } => 3,
            PqkError::Numeric(_) => 4,
        }
    }
}
