use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum RaptError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("trajectory of length {len} is shorter than the required window of {required}")]
    TrajectoryTooShort { len: usize, required: usize },

    #[error("non-finite loss at step {step} (first offending parameter: {param})")]
    NonFiniteLoss { step: usize, param: String },

    #[error("non-finite gradient at window step {step}, dimension {dim}")]
    NonFiniteGradient { step: usize, dim: usize },

    #[error("non-finite score during calibration at step {step}")]
    NonFiniteScore { step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint payload CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { stored: u32, computed: u32 },

    #[error(transparent)]
    Diagnosis(#[from] crate::diagnosis::DiagnosisError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = RaptError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> RaptError {
    RaptError::Shape {
        op,
        detail: detail.into(),
    }
}
