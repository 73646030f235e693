use thiserror::Error;

pub type Result<T> = std::result::Result<T, RtlError>;

#[derive(Debug, Error)]
pub enum RtlError {
    #[error("dimension mismatch in {context}: expected {expected}, got {received}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        received: usize,
    },

    #[error("arm index {arm} out of range for {num_arms} arms")]
    InvalidArm { arm: usize, num_arms: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("positivity violation: observed arm {arm} at row {row} has propensity {propensity}")]
    Positivity {
        row: usize,
        arm: usize,
        propensity: f64,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("model record error: {0}")]
    ModelRecord(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RtlError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        RtlError::InvalidParameter(msg.into())
    }
}
