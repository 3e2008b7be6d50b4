//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors produced by model construction, solvers, samplers, and file plumbing.
#[derive(Debug, Error)]
pub enum Error {
    /// A scalar input violated its domain (non-positive radius, negative SNR, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Vector or matrix dimensions do not match the model layout.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The network description is inconsistent (unknown node, missing inlet, cycle, ...).
    #[error("model definition error: {0}")]
    ModelDefinition(String),

    /// Steady-state Newton solve failed to reach the residual tolerance.
    #[error("steady solve did not converge after {iterations} iterations (residual {residual:.3e})")]
    SteadyNonConvergence { iterations: usize, residual: f64 },

    /// Newton iteration within a time step failed to converge.
    #[error("Newton diverged at t = {time:.6e}s after {iterations} iterations (residual {residual:.3e})")]
    NewtonDivergence {
        time: f64,
        iterations: usize,
        residual: f64,
    },

    /// The Newton iteration matrix could not be factorized.
    #[error("singular iteration matrix at t = {time:.6e}s")]
    SingularIterationMatrix { time: f64 },

    /// The damped normal equations could not be factorized.
    #[error("normal equations are singular even after damping")]
    SingularNormalEquations,

    /// Every particle returned a failed model evaluation.
    #[error("all particles failed model evaluation")]
    AllParticlesFailed,

    /// Adaptive tempering made no progress toward exponent 1.
    #[error("tempering stalled before the exponent reached 1 (stage limit {0} hit)")]
    TemperingStalled(usize),

    /// Observation data is unusable (missing columns, too few samples, ...).
    #[error("observation data error: {0}")]
    Observation(String),

    /// Calibration workspace inconsistency (missing artifact, hash mismatch, ...).
    #[error("workspace error: {0}")]
    Workspace(String),

    /// Wraps an error with the pipeline stage in which it occurred.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Attaches a pipeline stage name for error attribution.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
