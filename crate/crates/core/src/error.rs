//! Error type shared by every module.

/// Crate-wide error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on an operation's inputs was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Arithmetic produced a non-finite value or an otherwise unusable result.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    /// Filesystem problem while reading or writing artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// A file did not conform to its declared layout.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for [`Error::InvalidArgument`].
pub fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Shorthand for [`Error::NumericalFailure`].
pub fn numerical(msg: impl Into<String>) -> Error {
    Error::NumericalFailure(msg.into())
}
