//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by ingestion, metrics, recalibration, and decision analysis.
#[derive(Debug, Error)]
pub enum CalibError {
    /// A required column is missing from an input file.
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    /// Input data violates an invariant (bad confidence, duplicate id, NaN, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Two inputs that must describe the same samples do not line up.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// A caller-supplied argument is out of range or inconsistent.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// The operation needs data the input does not carry (e.g. full probability vectors).
    #[error("not supported: {0}")]
    Capability(String),

    /// A persisted state file has an unknown version or method tag.
    #[error("state format error: {0}")]
    Format(String),

    /// Pearson correlation is undefined for the given inputs.
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    /// PRR is undefined for the given inputs.
    #[error("PRR undefined: {0}")]
    UndefinedPrr(String),

    /// A Monte-Carlo estimate has no draws supporting the query.
    #[error("insufficient support: {0}")]
    InsufficientSupport(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CalibError>;
