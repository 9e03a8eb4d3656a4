use thiserror::Error;

use crate::lmm::LmmFit;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("time {t} lies outside the basis domain [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("mixed-model fit did not converge after {iterations} iterations")]
    FitFailure { iterations: usize, best: Box<LmmFit> },

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("rank deficiency: {0}")]
    Rank(String),

    #[error("EM did not converge after {iterations} iterations (last change {last_change:.3e})")]
    EmNotConverged { iterations: usize, last_change: f64 },

    #[error("optimization failure: {0}")]
    Optimization(String),

    #[error("{0}")]
    Ingest(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
