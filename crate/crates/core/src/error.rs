use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A model function or derivative returned a non-finite value.
    #[error("non-finite {what} at t = {time}")]
    EvaluationDomain { what: &'static str, time: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("configuration error: {0}")]
    Configuration(String),

    /// P(t) stopped being positive definite during integration.
    #[error("covariance lost positive definiteness at t = {time}")]
    Assumption1Violation { time: f64 },

    #[error("trajectory diverged (non-finite state) at t = {time}")]
    Divergence { time: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),
}

impl Error {
    /// Time stamp carried by integration failures.
    pub fn failure_time(&self) -> Option<f64> {
        match self {
            Error::Assumption1Violation { time }
            | Error::Divergence { time }
            | Error::EvaluationDomain { time, .. } => Some(*time),
            _ => None,
        }
    }

    pub(crate) fn dims(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
