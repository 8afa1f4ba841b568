use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration or generator specification is internally inconsistent.
    #[error("invalid specification: {0}")]
    Spec(String),

    /// A dataset or report file failed to parse.
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Two artifacts disagree on a structural property (e.g. feature dimension).
    #[error("schema mismatch: {0}")]
    Schema(String),

    /// Training produced a non-finite loss.
    #[error("numerical failure at epoch {epoch}: {msg}")]
    Numerical { epoch: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }
}
