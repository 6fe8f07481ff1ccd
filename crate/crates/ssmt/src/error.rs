use std::path::PathBuf;
use thiserror::Error;

/// Unified error type for the crate.
#[derive(Debug, Error)]
pub enum SsmtError {
    /// Shape mismatch between two operands.
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A dimension precondition was violated (indivisible sizes, empty axes, ...).
    #[error("dimension error: {0}")]
    Dim(String),

    /// Softmax over a lane whose entries are all -inf has no defined output.
    #[error("degenerate softmax: all entries along the axis are -inf")]
    DegenerateSoftmax,

    /// An API contract was violated (non-scalar loss, non-binary mask, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values where finite ones are required.
    #[error("non-finite values in {0}")]
    NonFinite(String),

    /// Invalid run configuration (rejected before any training starts).
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset-level problem (missing masks, orphaned files, ...).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Malformed image or manifest file.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// I/O failure, annotated with the offending path.
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Checkpoint failed its checksum or structural validation.
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, SsmtError>;

impl SsmtError {
    /// Process exit code for the CLI: 1 for validation/config problems,
    /// 2 for runtime faults.
    pub fn exit_code(&self) -> i32 {
        match self {
            SsmtError::Config(_) | SsmtError::Contract(_) | SsmtError::Dataset(_) => 1,
            _ => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SsmtError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        SsmtError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
