use thiserror::Error;

use crate::market::BidViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("power {power} MW outside [-{p_max}, {p_max}]")]
    PowerOutOfRange { power: f64, p_max: f64 },

    #[error("infeasible dispatch: {0}")]
    Infeasible(String),

    #[error("invalid bid: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidBid(Vec<BidViolation>),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("line {line}: {message}")]
    MalformedRow { line: usize, message: String },

    #[error("{0}")]
    Data(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("profit ratio undefined for oracle profit {0}")]
    UndefinedRatio(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("policy mode {found} cannot be used here (expected {expected})")]
    WrongMode { expected: String, found: String },

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
