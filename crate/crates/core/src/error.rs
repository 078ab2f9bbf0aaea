use thiserror::Error;

use crate::space::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid design space: {0}")]
    InvalidSpace(String),

    #[error("point violates the design space: {}", format_violations(.0))]
    InvalidPoint(Vec<Violation>),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("correlation matrix factorization failed after jitter escalation to {max_jitter:e}")]
    FactorizationFailed { max_jitter: f64 },

    #[error("model fit failed: every start hit a singular correlation matrix (n = {n}, {n_params} free parameters)")]
    FitFailed { n: usize, n_params: usize },

    #[error("candidate set exhausted: every candidate has been sampled")]
    ExhaustedSpace,

    #[error("evaluation budget exhausted")]
    BudgetExhausted,

    #[error("told point does not match the pending ask or any untold initial point")]
    UnexpectedPoint,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("tabular load error: {0}")]
    TabularLoad(String),

    #[error("tuple not present in the table: {0:?}")]
    UnknownTuple(Vec<usize>),

    #[error("benchmark input out of range: {0}")]
    OutOfRange(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
