use thiserror::Error;

pub type Result<T> = std::result::Result<T, QrmError>;

#[derive(Debug, Error)]
pub enum QrmError {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("invalid quantile levels: {0}")]
    InvalidLevels(String),

    #[error("invalid mixture weights: {0}")]
    InvalidWeights(String),

    #[error("quantile levels differ between distributions")]
    LevelMismatch,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("attribute {0} out of range")]
    AttributeOutOfRange(usize),

    #[error("non-finite loss or gradient: {0}")]
    Diverged(String),

    #[error("line {line}: {source}")]
    Jsonl {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl QrmError {
    /// Short machine-readable tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            QrmError::NonFinite { .. } => "non_finite",
            QrmError::InvalidLevels(_) => "invalid_levels",
            QrmError::InvalidWeights(_) => "invalid_weights",
            QrmError::LevelMismatch => "level_mismatch",
            QrmError::DimensionMismatch { .. } => "dimension_mismatch",
            QrmError::EmptyInput(_) => "empty_input",
            QrmError::InvalidConfig(_) => "invalid_config",
            QrmError::AttributeOutOfRange(_) => "attribute_out_of_range",
            QrmError::Diverged(_) => "diverged",
            QrmError::Jsonl { .. } => "jsonl",
            QrmError::Io(_) => "io",
            QrmError::Json(_) => "json",
            QrmError::Csv(_) => "csv",
        }
    }
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(QrmError::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}
