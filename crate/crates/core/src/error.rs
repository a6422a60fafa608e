use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    /// Bad magic, unsupported version, or malformed header field.
    #[error("format error: {0}")]
    Format(String),

    /// The payload ended before the declared sizes were satisfied.
    #[error("length error: {0}")]
    Length(String),

    /// Decoded values violate a data invariant (NaN, negative weight, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Arguments outside an operation's domain.
    #[error("{0}")]
    Domain(String),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn domain(message: impl Into<String>) -> Self {
        Error::Domain(message.into())
    }
}
