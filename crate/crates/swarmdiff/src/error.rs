//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by planning, geometry, training, and I/O operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("query point ({0}, {1}) is outside the field bounds")]
    OutOfBounds(f64, f64),

    #[error("scenario generation failed: {0}")]
    ScenarioGeneration(String),

    #[error("matrix is not symmetric positive definite (smallest eigenvalue {min_eig:.3e})")]
    NotSpd { min_eig: f64 },

    #[error("ill-conditioned covariance (condition number {cond:.3e})")]
    IllConditioned { cond: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("no roadmap path between the requested endpoints")]
    NoPath,

    #[error("dataset generation aborted: {0}")]
    DatasetGeneration(String),

    #[error("training diverged at step {step}: {detail}")]
    TrainingDiverged { step: u64, detail: String },

    #[error("non-finite activation in denoiser block {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("planning failed for start component {start} and goal component {goal}: {reason}")]
    PlanningFailed {
        start: usize,
        goal: usize,
        reason: String,
    },

    #[error("transport marginals are inconsistent: {0}")]
    InfeasibleMarginals(String),

    #[error("configuration invalid:\n{0}")]
    Config(String),

    #[error("parse error at byte offset {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 planning, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) => 1,
            Error::Io(_) | Error::Parse { .. } | Error::Format(_) => 3,
            _ => 2,
        }
    }
}
