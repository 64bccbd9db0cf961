//! Crate error type.

use thiserror::Error;

/// Errors surfaced by the solver, simulator, and scenario runner.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter, grid, or initial-condition invariant failed.
    #[error("validation: {0}")]
    Validation(String),

    /// A numerical guarantee was violated at runtime (nonconvergence,
    /// monotonicity loss, grid too coarse near a singularity, ...).
    #[error("numerical: {0}")]
    Numerical(String),

    /// Picard iteration did not reach tolerance; carries the last residual.
    #[error("fixed-point iteration exceeded {max_iter} iterations (residual {residual:.3e})")]
    MaxIter { max_iter: usize, residual: f64 },

    /// Scenario configuration could not be parsed or is incomplete.
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
