use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point ({x}, {y}) lies outside the mesh")]
    OutOfDomain { x: f64, y: f64 },

    #[error("matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: String },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("no closed form for {0}")]
    NoClosedForm(String),

    #[error("{path}: row {row}: time {time} does not increase")]
    NonMonotoneTime { path: PathBuf, row: usize, time: f64 },

    #[error("{path}: row {row}: head direction {theta} is outside [0, 2π)")]
    AngleOutOfRange { path: PathBuf, row: usize, theta: f64 },

    #[error("{path}: row {row}: {message}")]
    MalformedRow { path: PathBuf, row: usize, message: String },

    #[error("{model} requires a {mesh} mesh")]
    MissingMesh { model: &'static str, mesh: &'static str },

    #[error("Newton iteration did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    NotConverged { iterations: usize, gradient_norm: f64 },

    #[error("hyperparameter search stopped at the evaluation cap ({evaluations})")]
    EvaluationCap { evaluations: usize },

    #[error("Dawid-Sebastiani score is undefined for zero predictive variance")]
    ZeroVariance,

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
