use thiserror::Error;

/// Errors surfaced by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid generative or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Caller-supplied data or arguments violate a precondition.
    #[error("input error: {0}")]
    Input(String),
    /// A linear system could not be solved even after ridge escalation.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Degenerate estimating equation (e.g. vanishing denominator).
    #[error("estimation error: {0}")]
    Estimation(String),
    /// The outcome link scale is too close to zero to be usable.
    #[error("link degeneracy: {0}")]
    LinkDegeneracy(String),
    /// A fold x stratum x arm cell required for cross-fitting is empty.
    #[error("stratification error: {0}")]
    Stratification(String),
    /// The second-stage design does not identify the link coefficients.
    #[error("identification error: {0}")]
    Identification(String),
    /// Too few Monte Carlo draws for the requested precision.
    #[error("precision error: {0}")]
    Precision(String),
    /// Malformed tabular input.
    #[error("ingestion error: {0}")]
    Ingestion(String),
    /// Internal invariant violated; indicates a bug.
    #[error("internal consistency error: {0}")]
    Internal(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
