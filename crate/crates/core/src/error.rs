use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum MgError {
    #[error("length mismatch: expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index out of range: {what} {index} (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("missing features for modality `{0}`")]
    MissingModality(String),

    #[error("operation `{op}` requires a multimodal model")]
    NeedsMultimodal { op: &'static str },

    #[error("training diverged at iteration {iter}: loss {loss}")]
    Diverged { iter: usize, loss: f64 },

    #[error("malformed input at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("no interactions in {0}")]
    NoInteractions(PathBuf),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MgError {
    /// True for errors caused by user-supplied configuration rather than runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            MgError::Config(_)
                | MgError::NeedsMultimodal { .. }
                | MgError::LayoutMismatch(_)
                | MgError::MissingModality(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, MgError>;
