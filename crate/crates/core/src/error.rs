use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no convergence after {iterations} iterations (last delta {last_delta:e})")]
    NonConvergence { iterations: usize, last_delta: f64 },

    #[error("state {0} is outside the policy support")]
    OutsideSupport(String),

    #[error("unreachable goal: {0}")]
    UnreachableGoal(String),

    #[error(
        "non-finite loss at step {step}: td={td}, anchor={anchor}, rank={rank}, cql={cql}"
    )]
    NonFiniteLoss {
        step: usize,
        td: f64,
        anchor: f64,
        rank: f64,
        cql: f64,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
