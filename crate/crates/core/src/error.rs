use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in `{field}`: expected {expected}, got {actual}")]
    Dimension {
        field: String,
        expected: String,
        actual: String,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("`{field}` is not positive definite (Cholesky factorization failed)")]
    NotPositiveDefinite { field: String },

    #[error("`{field}` is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { field: String, min_eigenvalue: f64 },

    #[error(
        "innovation covariance H_{stage} is numerically singular (condition number {condition:e}); \
         process and measurement noise covariances must be positive definite"
    )]
    SingularInnovation { stage: usize, condition: f64 },

    #[error("stage {stage} out of range 0..={max}")]
    StageOutOfRange { stage: usize, max: usize },

    #[error("trajectory too short: need observations up to time {needed}, got {got}")]
    TrajectoryTooShort { needed: usize, got: usize },

    #[error("optimal cost {f_opt} exceeds the cost {cost} of the evaluated gains (arguments swapped?)")]
    OptimalCostAboveCost { f_opt: f64, cost: f64 },

    #[error(
        "sigma weight is not positive definite (min eigenvalue {min_eigenvalue:e}); \
         the pair (C, A) must be observable and A invertible to sample the dual system"
    )]
    SigmaNotPositiveDefinite { min_eigenvalue: f64 },
}

impl Error {
    pub(crate) fn dimension(
        field: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Dimension {
            field: field.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
