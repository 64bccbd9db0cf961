//! Delayed Poissonian mean-field (dPMF) neural dynamics.
//!
//! A population of integrate-and-fire units driven by unit-Fano-factor noise,
//! with a refractory period `epsilon` between hitting the spiking boundary at
//! zero and resetting to `Lambda`. In the mean-field limit the dynamics is
//! governed by a nonlinear delayed integral equation for the time change
//! `Phi(t) = nu*t + lambda*F(t)`, which maps the interacting dynamics onto a
//! noninteracting drifted Wiener process in the changed clock `sigma`.
//!
//! This crate solves that fixed-point problem block-wise by Picard iteration,
//! detects finite-time blowups of the firing rate, resolves the synchronous
//! fraction of each blowup from a probability-conservation root equation, and
//! cross-validates the mean-field solution against a finite-N interacting
//! particle simulator.
//!
//! Modules follow the pipeline:
//!
//! - [`kernels`]: closed-form first-passage and absorbed heat kernels of the
//!   unit-negative-drift Wiener process.
//! - [`curve`]: sampled monotone functions with exact plateaus and generalized
//!   inverses (the `Psi`/`Phi` calculus).
//! - [`params`] / [`init`]: model constants, grids, and initial conditions in
//!   time-changed coordinates.
//! - [`timechange`]: the regularized fixed-point solver up to the first blowup.
//! - [`renewal`]: the quasi-renewal Volterra equation for the cumulative flux,
//!   plus a Monte Carlo renewal oracle.
//! - [`blowup`]: onset detection, synchronous-size root solve, plateau
//!   continuation, and exit checks.
//! - [`density`]: Duhamel reconstruction of the density, pull-back to original
//!   time, conservation audits.
//! - [`particle`]: the finite-N interacting ensemble with avalanche resolution.
//! - [`scenario`] / [`report`]: config-driven runs and deterministic artifacts.
//!
//! Heavy inner loops (Monte Carlo paths, per-grid-point Volterra sums, particle
//! substeps) run data-parallel on rayon when the `parallel` feature is enabled
//! (default); results are bit-identical to the sequential fallback.

pub mod blowup;
pub mod curve;
pub mod density;
pub mod error;
pub mod exec;
pub mod init;
pub mod kernels;
pub mod mc;
pub mod params;
pub mod particle;
pub mod quad;
pub mod renewal;
pub mod report;
pub mod scenario;
pub mod timechange;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
