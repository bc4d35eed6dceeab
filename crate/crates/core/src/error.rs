use perco_nn::NnError;
use thiserror::Error;

use crate::bitstream::BitstreamError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] NnError),

    #[error(transparent)]
    Bitstream(#[from] BitstreamError),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image: {0}")]
    Image(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code: 2 usage, 3 data/format, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) => 2,
            Error::NonFiniteLoss { .. } | Error::Nn(NnError::NonFiniteGradient(_)) => 4,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
