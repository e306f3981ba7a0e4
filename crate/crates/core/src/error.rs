use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("numerical fault: {0}")]
    NumericalFault(String),

    #[error("degenerate sampling distribution: {0}")]
    DegenerateDistribution(&'static str),

    #[error("empty support: {0}")]
    EmptySupport(&'static str),

    #[error("empty buffer: {0}")]
    EmptyBuffer(&'static str),

    #[error("state {0} was never visited")]
    AbsentState(usize),

    #[error("transition row ({state}, {action}) has zero mass")]
    UndefinedRow { state: usize, action: usize },

    #[error("singular linear system: {0}")]
    SingularSystem(&'static str),

    #[error("rank deficient design matrix ({0})")]
    RankDeficient(String),

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("learner diverged during {phase}: {detail}")]
    Diverged { phase: &'static str, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed record: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn dims(what: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch { what, expected, got }
    }

    /// True for errors that indicate the numerics blew up rather than a usage problem.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NumericalFault(_) | Error::Diverged { .. })
    }
}
