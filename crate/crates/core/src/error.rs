use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A structural invariant between pipeline stages did not hold.
    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("image file: {0}")]
    ImageFormat(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Io { .. } | Error::WeightFormat(_) | Error::ImageFormat(_) => 3,
            Error::Validation(_) => 4,
            Error::InvalidArgument(_) | Error::Invariant(_) => 4,
        }
    }
}
