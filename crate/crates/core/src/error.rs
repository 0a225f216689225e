use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("sample `{sample}`: invalid field `{field}`: {message}")]
    Validation {
        sample: String,
        field: String,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty window: {0}")]
    EmptyWindow(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("sample `{sample}`: {source}")]
    InSample {
        sample: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }

    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }

    pub(crate) fn in_sample(self, sample: &str) -> Self {
        Error::InSample {
            sample: sample.to_string(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with sample context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::InSample { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by malformed or inconsistent input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self.root(),
            Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Format(_)
                | Error::UnsupportedVersion(_)
                | Error::Corrupt(_)
                | Error::Shape(_)
                | Error::EmptyWindow(_)
                | Error::Io(_)
        )
    }
}
