use thiserror::Error;

/// Failure modes shared by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {what} at t={t}")]
    NonFinite { what: String, t: usize },
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("did not converge: {0}")]
    Divergence(String),
    #[error("missing data: {0}")]
    Missing(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim(what: impl Into<String>, expected: usize, found: usize) -> Error {
    Error::Dimension {
        what: what.into(),
        expected,
        found,
    }
}
