use serde::Serialize;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Evidence returned when a set of answers admits no monotone concave utility.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inconsistency {
    /// Pair indices of an irreducible infeasible subset of the answers.
    pub conflicting_pairs: Vec<usize>,
    pub detail: String,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} lies outside the utility domain [0, {upper}]")]
    Domain { value: f64, upper: f64 },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("malformed program: {0}")]
    Model(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("answers are inconsistent with every monotone concave utility (pairs {:?})", .0.conflicting_pairs)]
    Inconsistent(Inconsistency),

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors caused by bad input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Domain { .. }
                | Error::Validation(_)
                | Error::Model(_)
                | Error::Parse { .. }
                | Error::Json(_)
        )
    }
}
