use thiserror::Error;

use crate::estimation::{Constraint, FitResult};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter vector outside the model's domain (non-positive scale, |rho| >= 1, ...).
    #[error("parameter domain error: {0}")]
    ParameterDomain(String),

    /// An argument outside the domain of a distribution function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Data for which the requested fit is undefined or lies on the boundary.
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("fit under {constraint} did not converge after {starts} starts (best loglik {})", best.loglik)]
    NonConvergence {
        constraint: Constraint,
        starts: usize,
        best: Box<FitResult>,
    },

    /// A test statistic more negative than the clamping slack; the nested fits disagree.
    #[error("negative {test} statistic {value:e}: optimizer failed to respect nesting")]
    NegativeStatistic { test: &'static str, value: f64 },

    #[error("state error: {0}")]
    State(String),

    /// A fit this computation depends on failed earlier.
    #[error("{0}")]
    FitFailed(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("simulation aborted: {failures} of {attempted} replicates failed")]
    TooManyFailures { failures: usize, attempted: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
