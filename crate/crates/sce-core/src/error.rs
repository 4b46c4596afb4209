use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("logsumexp over empty support (all entries are -inf)")]
    EmptySupport,

    #[error("batch contains no non-padded positions")]
    EmptyBatch,

    #[error("backward root must be a scalar, got {numel} elements")]
    NonScalarRoot { numel: usize },

    #[error("bucket assignment is degenerate: {0}")]
    DegenerateAssignment(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("ingestion failed: {0}")]
    Ingest(String),

    #[error("temporal split failed: {0}")]
    Split(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
