use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("similarity undefined for a zero vector")]
    UndefinedSimilarity,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cache error: {0}")]
    Cache(String),

    #[error("budget {budget} is unreachable: {reason} (floor {floor:.3})")]
    Calibration {
        budget: f64,
        floor: f64,
        reason: String,
    },

    #[error("PGM parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("fixture error: {0}")]
    Fixture(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
