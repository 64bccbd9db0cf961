//! Model constants and grid resolution, with validation.

use crate::error::Error;
use crate::Result;
use serde::{Deserialize, Serialize};

/// The four physical constants of the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Drift magnitude `nu > 0` (the autonomous dynamics drifts at -nu).
    pub nu: f64,
    /// Interaction coupling `lambda > 0`.
    pub lambda: f64,
    /// Reset level `Lambda > 0` reached after the refractory period.
    pub reset_level: f64,
    /// Refractory period `epsilon > 0`. Strictly positive: the delay is what
    /// keeps avalanches and the fixed-point blocks well defined.
    pub epsilon: f64,
}

impl ModelParams {
    /// Length of one contraction block in changed time.
    pub fn block_len(&self) -> f64 {
        self.nu * self.epsilon
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) {
            return Err(Error::validation(format!("nu must be positive, got {}", self.nu)));
        }
        // lambda = 0 is the noninteracting reference case used throughout the
        // test suite; only negative couplings are rejected.
        if !(self.lambda >= 0.0) {
            return Err(Error::validation(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(self.reset_level > 0.0) {
            return Err(Error::validation(format!(
                "reset level must be positive, got {}",
                self.reset_level
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::validation(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Discretization of the changed-time axis and the state axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Uniform step of the sigma grid.
    pub sigma_step: f64,
    /// Solve horizon in changed time.
    pub horizon_sigma: f64,
    /// Spatial step for gridded densities.
    pub x_step: f64,
    /// Spatial truncation; must exceed the reset level.
    pub x_max: f64,
}

impl GridSpec {
    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        for (name, v) in [
            ("sigma_step", self.sigma_step),
            ("horizon_sigma", self.horizon_sigma),
            ("x_step", self.x_step),
            ("x_max", self.x_max),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        if self.sigma_step >= params.block_len() {
            return Err(Error::validation(format!(
                "sigma_step must be < nu*epsilon = {} (need at least one grid point per \
                 contraction block), got {}",
                params.block_len(),
                self.sigma_step
            )));
        }
        if self.x_max <= params.reset_level {
            return Err(Error::validation(format!(
                "x_max must exceed the reset level {}, got {}",
                params.reset_level, self.x_max
            )));
        }
        Ok(())
    }

    /// Snap `sigma_step` down so that `nu * epsilon` is an exact multiple of
    /// it. Keeps block boundaries on grid points; never coarsens the grid.
    pub fn normalized(&self, params: &ModelParams) -> GridSpec {
        let block = params.block_len();
        let n = (block / self.sigma_step).ceil().max(1.0);
        GridSpec {
            sigma_step: block / n,
            ..*self
        }
    }

    /// Number of grid steps per contraction block (after normalization).
    pub fn steps_per_block(&self, params: &ModelParams) -> usize {
        (params.block_len() / self.sigma_step).round() as usize
    }

    /// The spatial grid 0, x_step, ..., with the reset level inserted as an
    /// exact node.
    pub fn x_grid(&self, params: &ModelParams) -> Vec<f64> {
        let n = (self.x_max / self.x_step).ceil() as usize;
        let mut xs: Vec<f64> = (0..=n).map(|i| i as f64 * self.x_step).collect();
        let lam = params.reset_level;
        if !xs.iter().any(|&x| x == lam) {
            let pos = xs.partition_point(|&x| x < lam);
            xs.insert(pos, lam);
        }
        xs
    }
}

/// Validate parameters and grid together (the spec-level entry point).
pub fn validate_params(params: &ModelParams, grid: &GridSpec) -> Result<()> {
    params.validate()?;
    grid.validate(params)
}
