use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("no observation pairs supplied")]
    EmptyInput,

    #[error("pair {pair}: marginal masses differ ({mu_mass} vs {nu_mass})")]
    MassMismatch {
        pair: usize,
        mu_mass: f64,
        nu_mass: f64,
    },

    #[error("pair {pair}: marginal has zero mass")]
    ZeroMass { pair: usize },

    #[error("negative or non-finite entry {value} at index {index}")]
    NonnegativityViolation { index: usize, value: f64 },

    #[error("row {row} of the aggregate plan sums to zero")]
    ZeroRow { row: usize },

    #[error("support of the prior cannot carry the marginals (residual {residual:e})")]
    InfeasibleSupport { residual: f64 },

    #[error("non-finite value during scaling iterations")]
    NonFinite,

    #[error("pair {pair} is infeasible under the current support")]
    Infeasible { pair: usize },

    #[error("ratio matrix of pair {pair} is not rank one (relative error {error:e})")]
    NotRankOne { pair: usize, error: f64 },

    #[error("row {row} of the transition matrix is not stochastic (sum {sum})")]
    InvalidTransition { row: usize, sum: f64 },

    #[error("count matrix row sums do not match the initial counts at row {row}")]
    MarginalMismatch { row: usize },

    #[error("negative count {value}")]
    NegativeCount { value: i64 },

    #[error("transition matrix is reducible")]
    Reducible,

    #[error("stationary solve did not reach tolerance (residual {residual:e})")]
    NotConverged { residual: f64 },

    #[error("need at least {needed} points with positive error, got {found}")]
    InsufficientPoints { needed: usize, found: usize },

    #[error("non-positive error value {value} in slope fit")]
    NonPositiveError { value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(expected: (usize, usize), found: (usize, usize)) -> Error {
    Error::ShapeMismatch {
        expected: format!("{}x{}", expected.0, expected.1),
        found: format!("{}x{}", found.0, found.1),
    }
}
