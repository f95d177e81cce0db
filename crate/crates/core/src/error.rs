use thiserror::Error;

/// Errors raised across the pipeline.
///
/// Variants group by the CLI exit code they map to: configuration, data,
/// state (missing or unloaded artifacts) and internal faults.
#[derive(Debug, Error)]
pub enum AmdError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("state error: {0}")]
    State(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AmdError {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            AmdError::Config(_) | AmdError::Usage(_) => 2,
            AmdError::Dimension(_)
            | AmdError::DegenerateFeature(_)
            | AmdError::Input(_)
            | AmdError::Capacity(_)
            | AmdError::Format(_)
            | AmdError::NonFinite(_)
            | AmdError::UndefinedMetric(_)
            | AmdError::Json(_) => 3,
            AmdError::State(_) => 4,
            AmdError::Io(_) | AmdError::Internal(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, AmdError>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::AmdError::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
