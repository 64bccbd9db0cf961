//! Initial conditions and their transformation into time-changed coordinates.
//!
//! Original-time data is a pair `(p0, f0)`: a density of active states on
//! `[0, inf)` and a flux density of recent inactivations on `[-epsilon, 0)`,
//! jointly of mass one. The changed-time solver instead needs `(q0, g0)`
//! together with the pre-history inverse time change `Psi0` on `[xi0, 0]`,
//! where
//!
//! ```text
//! Phi0(t) = nu t + lambda (F0(t) - F0(0-)),   F0(t) = int_{-eps}^t f0,
//! xi0     = Phi0(-eps) = -nu eps - lambda int f0,
//! Psi0    = Phi0^{-1},   G0(sigma) = (sigma - nu Psi0(sigma)) / lambda  (+ mass offset).
//! ```
//!
//! The stored cumulative pre-history flux starts at 0 in `xi0` and reaches
//! the refractory mass at 0-, so a restart after a synchronization event has
//! exactly the same shape as a fresh initial condition.

use crate::curve::MonotoneCurve;
use crate::error::Error;
use crate::kernels;
use crate::params::ModelParams;
use crate::quad;
use crate::Result;
use serde::{Deserialize, Serialize};

/// Mass tolerance for symbolic atom initial data.
pub const MASS_TOL_ATOM: f64 = 1e-8;
/// Mass tolerance when any component is a sampled table (quadrature error).
pub const MASS_TOL_GRIDDED: f64 = 1e-4;

/// Density of active states at start time: a point mass or a sampled table.
///
/// Atoms stay symbolic so kernel integrals against them evaluate in closed
/// form, without mollification error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DensitySpec {
    Atom { x0: f64, mass: f64 },
    Gridded { xs: Vec<f64>, values: Vec<f64> },
}

impl DensitySpec {
    pub fn mass(&self) -> f64 {
        match self {
            DensitySpec::Atom { mass, .. } => *mass,
            DensitySpec::Gridded { xs, values } => quad::trapz(xs, values),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DensitySpec::Atom { x0, mass } => {
                if !(*x0 > 0.0) {
                    return Err(Error::validation(format!("atom position must be > 0, got {x0}")));
                }
                if !(*mass > 0.0 && *mass <= 1.0 + MASS_TOL_ATOM) {
                    return Err(Error::validation(format!("atom mass must be in (0, 1], got {mass}")));
                }
            }
            DensitySpec::Gridded { xs, values } => {
                if xs.len() != values.len() || xs.len() < 2 {
                    return Err(Error::validation("gridded density needs >= 2 samples"));
                }
                if xs.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::validation("gridded density abscissae must increase"));
                }
                if let Some(v) = values.iter().find(|v| **v < 0.0 || !v.is_finite()) {
                    return Err(Error::validation(format!("negative density sample: {v}")));
                }
            }
        }
        Ok(())
    }

    /// `int k(x) q0(x) dx`: closed form for atoms, trapezoid for tables.
    pub fn integrate_kernel(&self, k: impl Fn(f64) -> f64) -> f64 {
        match self {
            DensitySpec::Atom { x0, mass } => mass * k(*x0),
            DensitySpec::Gridded { xs, values } => {
                let prods: Vec<f64> = xs
                    .iter()
                    .zip(values)
                    .map(|(&x, &q)| if x > 0.0 { k(x) * q } else { 0.0 })
                    .collect();
                quad::trapz(xs, &prods)
            }
        }
    }

    /// Density value at the absorbing boundary.
    pub fn value_at_zero(&self) -> f64 {
        match self {
            DensitySpec::Atom { .. } => 0.0,
            DensitySpec::Gridded { xs, values } => {
                if xs[0] == 0.0 {
                    values[0]
                } else {
                    0.0
                }
            }
        }
    }

    /// One-sided boundary slope, Richardson-extrapolated 3-point stencil.
    /// `None` for atoms (slope 0 at the boundary).
    pub fn boundary_slope(&self) -> Option<f64> {
        match self {
            DensitySpec::Atom { .. } => None,
            DensitySpec::Gridded { xs, values } => {
                if xs.len() < 3 || xs[0] != 0.0 {
                    return None;
                }
                let h1 = xs[1] - xs[0];
                let h2 = xs[2] - xs[0];
                // second-order one-sided difference for nonuniform spacing
                let d = (values[1] - values[0]) * h2 / (h1 * (h2 - h1))
                    - (values[2] - values[0]) * h1 / (h2 * (h2 - h1));
                Some(d)
            }
        }
    }

    /// Inverse-CDF sample given a uniform `u` in [0, 1).
    pub fn sample_state(&self, u: f64) -> f64 {
        match self {
            DensitySpec::Atom { x0, .. } => *x0,
            DensitySpec::Gridded { xs, values } => {
                let cdf = quad::cumtrapz(xs, values);
                let total = *cdf.last().unwrap();
                let target = u * total;
                let hi = cdf.partition_point(|&c| c <= target).min(xs.len() - 1);
                if hi == 0 {
                    return xs[0];
                }
                let lo = hi - 1;
                let span = cdf[hi] - cdf[lo];
                if span <= 0.0 {
                    return xs[lo];
                }
                xs[lo] + (target - cdf[lo]) / span * (xs[hi] - xs[lo])
            }
        }
    }
}

/// Sampled flux density `f0` on `[-epsilon, 0]` (original time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxTable {
    pub ts: Vec<f64>,
    pub values: Vec<f64>,
}

impl FluxTable {
    /// Constant flux density integrating to `mass` over `[-epsilon, 0]`.
    pub fn uniform(epsilon: f64, mass: f64, n: usize) -> FluxTable {
        let n = n.max(2);
        let ts: Vec<f64> = (0..n)
            .map(|i| -epsilon + epsilon * i as f64 / (n - 1) as f64)
            .collect();
        let c = mass / epsilon;
        FluxTable {
            values: vec![c; n],
            ts,
        }
    }

    pub fn mass(&self) -> f64 {
        quad::trapz(&self.ts, &self.values)
    }

    pub fn validate(&self, epsilon: f64) -> Result<()> {
        if self.ts.len() != self.values.len() || self.ts.len() < 2 {
            return Err(Error::validation("flux table needs >= 2 samples"));
        }
        if self.ts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("flux table abscissae must increase"));
        }
        if (self.ts[0] + epsilon).abs() > 1e-12 || self.ts.last().unwrap().abs() > 1e-12 {
            return Err(Error::validation(format!(
                "flux table must cover [-epsilon, 0] = [{}, 0], covers [{}, {}]",
                -epsilon,
                self.ts[0],
                self.ts.last().unwrap()
            )));
        }
        if let Some(v) = self.values.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(Error::validation(format!("negative flux sample: {v}")));
        }
        Ok(())
    }
}

/// Initial data in time-changed coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialCondition {
    /// Active-state density (unchanged by the time change).
    pub q0: DensitySpec,
    /// Left end of the pre-history window, `xi0 < 0`.
    pub xi0: f64,
    /// Pre-history inverse time change on `[xi0, 0]`, mapping onto `[-eps, 0]`.
    pub psi0: MonotoneCurve,
    /// Cumulative pre-history flux on `[xi0, 0]`: 0 at `xi0`, refractory mass at 0.
    pub g0_cum: MonotoneCurve,
    /// Sampled flux density `g0 = dG0/dsigma` at the `g0_cum` abscissae.
    pub g0_density: Vec<f64>,
    pub active_mass: f64,
    pub refractory_mass: f64,
}

/// Transform original-time initial data `(p0, f0)` into the time-changed
/// initial condition. `f0 = None` means an empty refractory history.
pub fn build_initial(
    params: &ModelParams,
    p0: DensitySpec,
    f0: Option<&FluxTable>,
) -> Result<InitialCondition> {
    params.validate()?;
    p0.validate()?;
    if let Some(f) = f0 {
        f.validate(params.epsilon)?;
    }

    let m_active = p0.mass();
    let m_flux = f0.map(FluxTable::mass).unwrap_or(0.0);
    let gridded = matches!(p0, DensitySpec::Gridded { .. }) || f0.is_some();
    let tol = if gridded { MASS_TOL_GRIDDED } else { MASS_TOL_ATOM };
    let defect = m_active + m_flux - 1.0;
    if defect.abs() > tol {
        return Err(Error::validation(format!(
            "total mass must be 1 within {tol:.0e}: active {m_active} + refractory {m_flux} \
             deviates by {defect:.3e}"
        )));
    }

    let xi0 = -params.nu * params.epsilon - params.lambda * m_flux;

    // Phi0(t) = nu t + lambda (F0(t) - F0(0)) on [-eps, 0]
    let (ts, phi0_vals, g0_density): (Vec<f64>, Vec<f64>, Vec<f64>) = match f0 {
        None => (
            vec![-params.epsilon, 0.0],
            vec![xi0, 0.0],
            vec![0.0, 0.0],
        ),
        Some(f) => {
            let cum = quad::cumtrapz(&f.ts, &f.values);
            let phi: Vec<f64> = f
                .ts
                .iter()
                .zip(&cum)
                .map(|(&t, &ft)| params.nu * t + params.lambda * (ft - m_flux))
                .collect();
            // g0(Phi0(t)) = f0(t) / (nu + lambda f0(t)); exact at the sample images
            let g0: Vec<f64> = f
                .values
                .iter()
                .map(|&fv| fv / (params.nu + params.lambda * fv))
                .collect();
            (f.ts.clone(), phi, g0)
        }
    };
    let phi0 = MonotoneCurve::continuous(ts.clone(), phi0_vals.clone())?;
    let psi0 = phi0.right_inverse();

    // G0(Phi0(t)) = F0(t): the cumulative flux carries over exactly onto the
    // image grid (and stays well defined at lambda = 0, where the identity
    // G0 = (id - nu Psi0)/lambda + m degenerates).
    let g0_cum = match f0 {
        None => MonotoneCurve::continuous(phi0_vals, vec![0.0, 0.0])?,
        Some(f) => MonotoneCurve::continuous(phi0_vals, quad::cumtrapz(&f.ts, &f.values))?,
    };

    Ok(InitialCondition {
        q0: p0,
        xi0,
        psi0,
        g0_cum,
        g0_density,
        active_mass: m_active,
        refractory_mass: m_flux,
    })
}

impl InitialCondition {
    /// Rebuild an initial condition directly from time-changed history
    /// (the restart path after a synchronization event).
    pub fn from_history(
        q0: DensitySpec,
        psi0: MonotoneCurve,
        g0_cum: MonotoneCurve,
        g0_density: Vec<f64>,
    ) -> Result<Self> {
        q0.validate()?;
        let xi0 = psi0.domain().0;
        if xi0 >= 0.0 {
            return Err(Error::validation("pre-history must start at xi0 < 0"));
        }
        if psi0.domain().1 != 0.0 {
            return Err(Error::validation("pre-history must end at sigma = 0"));
        }
        let refractory_mass = g0_cum.range().1;
        let active_mass = q0.mass();
        let defect = active_mass + refractory_mass - 1.0;
        if defect.abs() > 5e-3 {
            return Err(Error::numerical(format!(
                "restart history mass deviates from 1 by {defect:.3e}"
            )));
        }
        Ok(InitialCondition {
            q0,
            xi0,
            psi0,
            g0_cum,
            g0_density,
            active_mass,
            refractory_mass,
        })
    }

    /// The pre-history time change `Phi0` (right-continuous inverse of `Psi0`).
    pub fn phi0(&self) -> MonotoneCurve {
        self.psi0.right_inverse()
    }

    /// Reject initial densities that would blow up instantaneously:
    /// requires `q0(0) = 0` and `dq0/dx(0)/2 < 1/lambda`.
    pub fn no_instant_blowup(&self, lambda: f64) -> Result<()> {
        if self.q0.value_at_zero().abs() > 1e-12 {
            return Err(Error::validation(
                "initial density must vanish at the absorbing boundary",
            ));
        }
        if let Some(slope) = self.q0.boundary_slope() {
            if slope / 2.0 >= 1.0 / lambda {
                return Err(Error::validation(format!(
                    "initial boundary flux {} exceeds 1/lambda = {}: instantaneous blowup",
                    slope / 2.0,
                    1.0 / lambda
                )));
            }
        }
        Ok(())
    }

    /// `int H(sigma, x) q0(x) dx` — the first-passage source of the flux.
    pub fn source_cdf(&self, sigma: f64) -> f64 {
        if sigma <= 0.0 {
            return 0.0;
        }
        self.q0.integrate_kernel(|x| kernels::fp_cdf(sigma, x))
    }

    /// `int h(sigma, x) q0(x) dx` — the first-passage density source.
    pub fn source_pdf(&self, sigma: f64) -> f64 {
        if sigma <= 0.0 {
            return 0.0;
        }
        self.q0.integrate_kernel(|x| kernels::fp_pdf(sigma, x))
    }

    /// `int kappa(sigma, y, x) q0(x) dx` — the surviving-density source.
    pub fn source_heat(&self, sigma: f64, y: f64) -> f64 {
        self.q0.integrate_kernel(|x| kernels::heat_kernel(sigma, y, x))
    }
}
