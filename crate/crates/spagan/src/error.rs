//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Operand shapes do not conform for the requested operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A softmax group with no members.
    #[error("degenerate group {group} in segment operation: group is empty")]
    DegenerateGroup { group: usize },

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Dataset directory failed validation; names the offending field.
    #[error("dataset load error in `{field}`: {detail}")]
    Load { field: String, detail: String },

    /// Non-finite or out-of-domain numeric input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Index out of range.
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    /// Training diverged or was otherwise aborted.
    #[error("training error at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },

    /// API misuse (e.g. backward on a non-scalar, empty evaluation mask).
    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn load(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Load {
            field: field.into(),
            detail: detail.into(),
        }
    }
}
