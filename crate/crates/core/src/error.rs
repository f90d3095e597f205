use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("rollout diverged: non-finite state produced at stage {stage}")]
    RolloutDiverged { stage: usize },

    #[error("non-finite stage cost at stage {stage}")]
    NonFiniteCost { stage: usize },

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    #[error("{what} is not positive definite{}", stage.map(|s| format!(" (stage {s})")).unwrap_or_default())]
    NotPositiveDefinite {
        what: &'static str,
        stage: Option<usize>,
    },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("degenerate state {state} at stage {stage}: no reachable desirability mass")]
    DegenerateState { stage: usize, state: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
