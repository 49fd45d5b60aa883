//! Crate-wide error type and result alias.

use crate::ep::TmvnMoments;

/// Errors surfaced by the estimation engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid truncation interval [{lower}, {upper}]")]
    InvalidInterval { lower: f64, upper: f64 },

    #[error("variance must be positive and finite, got {0}")]
    NonPositiveVariance(f64),

    #[error("truncated mass underflow (log mass {log_mass:.3e}); the constraint is infeasible")]
    DegenerateMass { log_mass: f64 },

    #[error("outcome code {code} is out of range for a {kind} model with {dim} alternatives")]
    InvalidOutcome {
        code: usize,
        kind: &'static str,
        dim: usize,
    },

    #[error("constraint system is not involutory")]
    NotInvolutory,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("position subset is empty")]
    EmptySubset,

    #[error("EP did not converge after {sweeps} sweeps (residual {residual:.3e})")]
    EpNotConverged {
        sweeps: usize,
        residual: f64,
        /// Last iterate; callers may accept it under a `ReuseLast` policy.
        moments: Box<TmvnMoments>,
    },

    #[error("every truncation factor has vanishing mass; the region is infeasible")]
    InfeasibleRegion,

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("normal equations for the coefficient update are singular")]
    SingularDesign,

    #[error(
        "conditional sample covariance is near singular (lambda_min {lambda_min:.3e}, lambda_max {lambda_max:.3e})"
    )]
    NearSingularShat { lambda_min: f64, lambda_max: f64 },

    #[error("failed to bracket the secular equation root after {0} doublings")]
    BracketFailure(usize),

    #[error("surrogate lower bound decreased for {0} consecutive iterations")]
    NoProgress(usize),

    #[error("no feasible starting point found after {0} projection attempts")]
    NoFeasibleStart(usize),

    #[error("rejection acceptance rate {0:.3e} is too low; use the Gibbs sampler instead")]
    AcceptanceTooLow(f64),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("TOML error: {0}")]
    TomlDe(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
