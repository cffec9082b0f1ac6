//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on shape. Always names the operation.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operand has a shape the operation cannot accept.
    #[error("{op}: expected {expected}, got {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    /// Argument outside its valid domain (labels, positions, bit widths, ...).
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// A forward op produced or was asked to produce an undefined value
    /// (log/sqrt of a non-positive number, NaN/Inf in a loss term, ...).
    #[error("non-finite or undefined value in {context}")]
    NonFinite { context: String },

    #[error("quantizer: {0}")]
    Quantizer(String),

    #[error("unknown architecture `{0}`; known: {1}")]
    UnknownArch(String, String),

    #[error("config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("archive format version {found} unsupported (expected {expected})")]
    ArchiveVersion { found: u32, expected: u32 },

    #[error("archive digest mismatch for `{0}` (file corrupted or edited)")]
    ArchiveDigest(String),

    #[error("archive blob `{name}` truncated: {got} bytes, expected {expected}")]
    ArchiveTruncated {
        name: String,
        got: usize,
        expected: usize,
    },

    #[error("archive: {0}")]
    ArchiveFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
