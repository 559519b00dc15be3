use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SmdtError>;

#[derive(Debug, Error)]
pub enum SmdtError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("retrieval error: {0}")]
    Retrieval(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("version mismatch in {artifact}: expected {expected}, found {found}")]
    VersionMismatch {
        artifact: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
}

impl SmdtError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        SmdtError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
