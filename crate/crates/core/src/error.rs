use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("index {index} out of range for dimension {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension {n} exceeds the supported maximum of {max}")]
    DimensionTooLarge { n: usize, max: usize },

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("{op}: quadrature did not converge within {evals} evaluations (error estimate {error:e})")]
    NonConvergence {
        op: &'static str,
        evals: usize,
        error: f64,
    },

    #[error("{op}: probability {value} outside [0, 1] beyond tolerance")]
    ProbabilityOutOfRange { op: &'static str, value: f64 },

    #[error("degenerate truncation: normalizing constant {alpha:e} is below 1e-300")]
    DegenerateTruncation { alpha: f64 },

    #[error("degenerate design: all regressor values are equal")]
    DegenerateDesign,

    #[error("rejection sampler exhausted its budget: {accepted} accepted out of {proposals} proposals")]
    BudgetExhausted { proposals: u64, accepted: usize },
}
