use thiserror::Error;

/// Errors raised by model construction, path evaluation and the estimators.
#[derive(Debug, Error)]
pub enum TvoError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("beta must be finite, got {0}")]
    NonFiniteBeta(f64),

    #[error("beta {0} outside the admissible range {1}")]
    BetaOutOfRange(f64, &'static str),

    #[error("degenerate path covariance at beta {beta} (condition number {condition:.3e})")]
    DegenerateCovariance { beta: f64, condition: f64 },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("quadrature needs at least 3 points, got {0}")]
    QuadratureTooShort(usize),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("eta evaluator is not monotone: eta(1) = {eta1} < eta(0) = {eta0}")]
    NonMonotone { eta0: f64, eta1: f64 },

    #[error("moment curve must span [0, 1] with at least {min_points} points: {reason}")]
    InvalidCurve { min_points: usize, reason: String },

    #[error("invalid log-weight grid: {0}")]
    InvalidGrid(String),

    #[error("estimator needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("unsupported model kind for {0}")]
    UnsupportedModel(&'static str),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TvoError>;
