use thiserror::Error;

use crate::lipschitz::QuadraticBound;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("dataset file is empty")]
    EmptyFile,
    #[error("dataset is empty")]
    EmptyDataSet,
    #[error("noise columns are not accepted: {0}")]
    NoiseColumns(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("solver reported infeasibility")]
    Infeasible,
    #[error("numerical failure in conic solver: {0}")]
    NumericalFailure(String),
    #[error("data points are degenerate (rank {rank} < {dim})")]
    DegenerateData { rank: usize, dim: usize },

    #[error("shape synthesis infeasible")]
    SynthesisInfeasible,
    #[error("data region is degenerate: {0}")]
    DegenerateRegion(String),

    #[error("bad interval widths: {0}")]
    BadWidths(String),
    #[error("no data points inside ring [{gamma_lo}, {gamma_hi}]")]
    EmptyRing { gamma_lo: f64, gamma_hi: f64 },
    #[error("data-density assumption violated: {0}")]
    AssumptionViolated(String),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("covariance matrix is singular: {0}")]
    SingularCovariance(String),
    #[error("GP bound did not converge after {iterations} iterations")]
    MaxIterationsExceeded {
        iterations: usize,
        best: Box<QuadraticBound>,
    },
    #[error("quadratic fit infeasible: {0}")]
    FitInfeasible(String),

    #[error("shape matrix is singular")]
    SingularP,
    #[error("interval [{gamma_lo}, {gamma_hi}] is infeasible")]
    IntervalInfeasible { gamma_lo: f64, gamma_hi: f64 },
    #[error("all intervals infeasible")]
    AllIntervalsInfeasible,

    #[error("state outside safe set (level {level} > gamma {gamma})")]
    OutsideSafeSet { level: f64, gamma: f64 },
    #[error("non-finite state during integration")]
    NonFiniteState,
    #[error("recomputation infeasible: {0}")]
    RecomputeInfeasible(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
