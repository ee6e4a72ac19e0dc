use std::io;

/// Errors produced by the index and its storage layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// All projected values are identical, so no equal-width split exists.
    #[error("degenerate projection range")]
    DegenerateRange,

    #[error("not found: {0}")]
    NotFound(String),

    #[error("corruption: {0}")]
    Corruption(String),

    #[error("out of space: {0}")]
    OutOfSpace(String),

    #[error("duplicate vector id {0}")]
    DuplicateId(u64),

    #[error("duplicate media id {0}")]
    DuplicateMedia(u64),

    #[error("unknown media id {0}")]
    UnknownMedia(u64),

    /// The tree and its feature store disagree; the index cannot continue safely.
    #[error("integrity violation: {0}")]
    Integrity(String),

    #[error("index is closed")]
    Closed,

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corruption(msg.into())
}
