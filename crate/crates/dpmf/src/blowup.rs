//! Blowup onset detection and analytic resolution of synchronization events.
//!
//! A blowup starts at the first `sigma` where the flux density `g` reaches
//! `1/lambda` (equivalently, the raw inverse-time-change slope hits zero).
//! Under the full-blowup condition (strictly positive left slope of `g` at
//! onset) the inverse time change continues as an exact constant on
//! `[S, U = S + lambda*pi]`, where the synchronous fraction `pi` is the
//! smallest positive root of the conservation equation
//!
//! ```text
//! zeta(p) = p - int H(lambda p, x) q(S, x) dx = 0.
//! ```
//!
//! During the plateau resets are stalled, so the flux evolves by the
//! no-reset first-passage formula; at the exit the dynamics re-enters the
//! generic pipeline as a fresh initial condition built from the post-blowup
//! density and the refractory window history.

use crate::curve::MonotoneCurve;
use crate::density::DensitySnapshot;
use crate::error::Error;
use crate::exec;
use crate::init::{DensitySpec, InitialCondition};
use crate::kernels;
use crate::params::ModelParams;
use crate::quad;
use crate::renewal::FluxCurve;
use crate::timechange::{refine_crossing, SolverState};
use crate::Result;
use serde::{Deserialize, Serialize};

/// Root residual bound accepted for `pi`.
pub const PI_RESIDUAL_TOL: f64 = 1e-8;

/// How a blowup episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventStatus {
    /// Exit conditions held; the run resumed after the plateau.
    Resumed,
    /// Exit flux was at the blowup threshold within tolerance; run stopped.
    MarginalExit,
    /// Onset slope indistinguishable from zero; no constructive continuation.
    InconclusiveSlope,
    /// Next onset followed within 10 grid steps of this exit; run halted.
    AccumulationSuspected,
}

/// One synchronization episode (global coordinates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupEvent {
    /// Ordinal of the event in the run (1-based).
    pub k: usize,
    /// Onset in changed time.
    pub s: f64,
    /// Blowup instant in original time, `t = Psi(s)`.
    pub t: f64,
    /// Synchronous fraction, in (0, active mass at onset).
    pub pi: f64,
    /// Quadratic coefficient `a = (lambda/nu) * dg/dsigma(s-)`.
    pub a: f64,
    /// Plateau exit in changed time, `u = s + lambda*pi` exactly.
    pub u: f64,
    /// Flux density at the exit (must be below 1/lambda to resume).
    pub exit_g: f64,
    pub status: EventStatus,
}

/// First crossing of the flux density through `1/lambda`, refined by local
/// quadratic interpolation; `None` when the threshold is never reached.
pub fn detect_onset(flux: &FluxCurve, lambda: f64) -> Option<f64> {
    if lambda <= 0.0 {
        return None;
    }
    let target = 1.0 / lambda;
    let idx = flux.g.iter().position(|&g| g >= target)?;
    let sigmas: Vec<f64> = (0..flux.g.len())
        .map(|i| i as f64 * flux.sigma_step)
        .collect();
    Some(refine_crossing(&sigmas, &flux.g, idx, target))
}

/// Outcome of the full-blowup slope test at an onset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FullBlowup {
    /// Left slope positive: quadratic coefficient `a` returned.
    Confirmed { a: f64 },
    /// Slope indistinguishable from zero at this grid resolution.
    Inconclusive,
    /// Slope estimate significantly negative (upstream numerical trouble).
    Rejected { slope: f64 },
}

/// Estimate the one-sided slope of `g` at the onset by linear least squares
/// over the trailing pre-onset window, and convert to the quadratic
/// coefficient `a = (lambda/nu) * slope`.
pub fn full_blowup_check(
    flux: &FluxCurve,
    s1: f64,
    params: &ModelParams,
) -> Result<FullBlowup> {
    let step = flux.sigma_step;
    let n_end = ((s1 / step).floor() as usize).min(flux.g.len() - 1);
    let k = 5usize.max((0.05 * s1 / step).ceil() as usize);
    if n_end + 1 < k + 1 {
        return Err(Error::numerical(format!(
            "only {n_end} samples before onset; need {k} for the slope fit"
        )));
    }
    let lo = n_end + 1 - k;
    let xs: Vec<f64> = (lo..=n_end).map(|i| i as f64 * step).collect();
    let ys: Vec<f64> = (lo..=n_end).map(|i| flux.g[i]).collect();
    let (slope, stderr) = linear_fit_slope(&xs, &ys);
    if slope > 0.0 && slope > 2.0 * stderr {
        Ok(FullBlowup::Confirmed {
            a: params.lambda / params.nu * slope,
        })
    } else if slope.abs() <= 2.0 * stderr.max(1e-14) {
        Ok(FullBlowup::Inconclusive)
    } else {
        Ok(FullBlowup::Rejected { slope })
    }
}

/// Least-squares slope with its standard error.
fn linear_fit_slope(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|&x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(&x, &y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let dof = (xs.len().max(3) - 2) as f64;
    ((slope), (ss_res / dof / sxx).sqrt())
}

/// The conservation function `zeta(p) = p - int H(lambda p, x) q(x) dx`.
pub fn zeta(p: f64, q_at_onset: &DensitySnapshot, lambda: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    let width = (lambda * p).sqrt().max(1e-12);
    q_at_onset
        .integrate_kernel_refined(|x| kernels::fp_cdf(lambda * p, x), width)
        .mul_add(-1.0, p)
}

/// Smallest strictly positive root of `zeta`: the synchronous fraction.
///
/// Scans upward from `p_seed` in steps of `mass/1000` until the sign turns,
/// then bisects to 1e-12. `p_seed` should sit below any plateau scale but
/// away from the degenerate root at 0 (`max(sigma_step/lambda, 1e-6)`).
pub fn solve_pi(q_at_onset: &DensitySnapshot, lambda: f64, p_seed: f64) -> Result<f64> {
    let mass = q_at_onset.active_mass;
    if !(mass > 0.0) {
        return Err(Error::numerical("no active mass at onset"));
    }
    // Near p = 0 the true zeta is O(p^2)-small and can be swamped by the
    // snapshot's interpolation noise (or by the delta-floor defect in
    // 1 - lambda*g at a numerically detected onset). Scan until the dip is
    // genuinely negative beyond that floor, then bracket the upward crossing.
    const NOISE_FLOOR: f64 = 1e-7;
    let scan = mass / 1000.0;
    let limit = mass * (1.0 + 1e-6) + scan;
    let mut p = p_seed;
    let mut lo = None;
    while p <= limit {
        if zeta(p, q_at_onset, lambda) < -NOISE_FLOOR {
            lo = Some(p);
            break;
        }
        p += scan;
    }
    let mut lo = lo.ok_or_else(|| {
        Error::numerical(
            "zeta never dips below the noise floor in (0, mass]: no blowup-scale \
             root (violates the jump theorem; indicates an upstream error)",
        )
    })?;
    let mut hi = lo;
    loop {
        hi += scan;
        if zeta(hi, q_at_onset, lambda) > 0.0 {
            break;
        }
        if hi > limit {
            return Err(Error::numerical(
                "no sign change of zeta in (0, mass]: violates the jump theorem; \
                 indicates an upstream numerical error",
            ));
        }
        lo = hi;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if zeta(mid, q_at_onset, lambda) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    let pi = 0.5 * (lo + hi);
    let residual = zeta(pi, q_at_onset, lambda);
    if residual.abs() > PI_RESIDUAL_TOL {
        return Err(Error::numerical(format!(
            "pi root residual {residual:.3e} exceeds {PI_RESIDUAL_TOL:.0e}"
        )));
    }
    if !(pi > 0.0 && pi < mass) {
        return Err(Error::numerical(format!(
            "pi = {pi} outside (0, {mass}): violates the jump theorem"
        )));
    }
    Ok(pi)
}

/// Flux samples on a plateau `[s1, u1]` (no-reset evolution).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauFlux {
    /// Sample abscissae: exact `s1`, grid-aligned interior points, exact `u1`.
    pub sigmas: Vec<f64>,
    /// Cumulative flux at the samples (starts at `G(s1)`).
    pub g_cum: Vec<f64>,
    /// Flux density at the samples.
    pub g: Vec<f64>,
}

/// Extend the state across the plateau: `Psi` becomes exactly constant on
/// `[s1, u1]` (two appended breakpoints, never resampled), the flux evolves
/// by the no-reset formula
/// `G(sigma) = G(s1) + int H(sigma - s1, x) q(s1, x) dx`,
/// and the event is recorded on the state.
pub fn continue_plateau(
    state: &mut SolverState,
    event: &BlowupEvent,
    q_onset: &DensitySnapshot,
    s1_local: f64,
    u1_local: f64,
) -> Result<PlateauFlux> {
    // psi plateau: append (s1, T1), (u1, T1); T1 is the current right end of psi
    let t_plateau = state.psi.eval(s1_local.min(state.psi.domain().1));
    if state.psi.domain().1 < s1_local {
        state.psi.append(s1_local, t_plateau)?;
    }
    state.psi.append(u1_local, t_plateau)?;

    let step = state.flux.sigma_step;
    let g_s1 = state.flux.eval_g_cum(s1_local);
    let mut sigmas = vec![s1_local];
    let mut k = (s1_local / step).floor() as usize + 1;
    while (k as f64) * step < u1_local {
        sigmas.push(k as f64 * step);
        k += 1;
    }
    sigmas.push(u1_local);

    let rows = exec::map_collect(sigmas.len(), |i| {
        let s = sigmas[i];
        let el = s - s1_local;
        if el <= 0.0 {
            (g_s1, q_onset.boundary_slope() / 2.0)
        } else {
            (
                g_s1 + q_onset.integrate_kernel(|x| kernels::fp_cdf(el, x)),
                q_onset.integrate_kernel(|x| kernels::fp_pdf(el, x)),
            )
        }
    });
    let g_cum: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let g: Vec<f64> = rows.iter().map(|r| r.1).collect();
    state.events.push(event.clone());
    Ok(PlateauFlux { sigmas, g_cum, g })
}

/// Decision at the plateau exit.
#[derive(Debug)]
pub enum ExitDecision {
    /// Exit conditions hold: restart from the post-blowup state.
    Resume {
        restart: InitialCondition,
        /// Post-blowup active density `q(u1, .)`.
        q_exit: DensitySnapshot,
        exit_g: f64,
    },
    /// `g(u1)` within the threshold band, or restart slope below the floor.
    Stop { exit_g: f64, status: EventStatus },
}

/// Check the nonexplosive exit condition at `u1` and, if it holds, build the
/// restart initial condition (density `q(u1, .)` plus the refractory flux
/// history on `[xi(u1), u1)`), re-entering the generic pipeline.
#[allow(clippy::too_many_arguments)]
pub fn exit_check(
    state: &SolverState,
    init: &InitialCondition,
    params: &ModelParams,
    q_onset: &DensitySnapshot,
    plateau: &PlateauFlux,
    s1_local: f64,
    u1_local: f64,
    pi: f64,
    delta_min: f64,
) -> Result<ExitDecision> {
    let lambda = params.lambda;
    let exit_g = q_onset.integrate_kernel(|x| kernels::fp_pdf(lambda * pi, x));
    let restart_slope = (1.0 - lambda * exit_g) / params.nu;
    if exit_g >= 1.0 / lambda || restart_slope <= delta_min {
        return Ok(ExitDecision::Stop {
            exit_g,
            status: EventStatus::MarginalExit,
        });
    }

    // q(u1, y) = int kappa(lambda pi, y, x) q(s1, x) dx
    let elapsed = lambda * pi;
    let xs = q_onset.xs.clone();
    let values = exec::map_collect(xs.len(), |iy| {
        let y = xs[iy];
        if y == 0.0 {
            return 0.0;
        }
        q_onset.integrate_kernel(|x| kernels::heat_kernel(elapsed, y, x))
    });
    let active_mass = quad::trapz(&xs, &values);
    let q_exit = DensitySnapshot {
        sigma: u1_local,
        xs: xs.clone(),
        values: values.clone(),
        active_mass,
        refractory_mass: 1.0 - active_mass,
    };

    // refractory history window [xi(u1), u1): xi(u1) = Phi(T1 - eps)
    let t1 = state.psi.eval(u1_local);
    let xi_u1 = state.psi.inverse_eval_right(t1 - params.epsilon);

    // sample points: psi breakpoints inside the window plus exact endpoints
    let mut pts = vec![xi_u1];
    for &x in state.psi.xs() {
        if x > xi_u1 && x < u1_local {
            pts.push(x);
        }
    }
    pts.push(u1_local);
    pts.dedup();

    let g_total_at = |u: f64| segment_g_total(init, &state.flux, plateau, s1_local, u);
    let g_density_at = |u: f64| segment_g_density(init, &state.flux, plateau, s1_local, u);

    let base = g_total_at(xi_u1);
    let mut psi_ys = Vec::with_capacity(pts.len());
    let mut g_ys = Vec::with_capacity(pts.len());
    let mut g_density = Vec::with_capacity(pts.len());
    for (i, &u) in pts.iter().enumerate() {
        let y = if i == 0 {
            -params.epsilon
        } else if i + 1 == pts.len() {
            0.0
        } else {
            (state.psi.eval(u) - t1).clamp(-params.epsilon, 0.0)
        };
        psi_ys.push(y);
        g_ys.push((g_total_at(u) - base).max(g_ys.last().copied().unwrap_or(0.0)));
        g_density.push(g_density_at(u));
    }
    // shift abscissae so the new segment starts at 0
    let shifted: Vec<f64> = pts.iter().map(|&u| u - u1_local).collect();
    let psi0 = MonotoneCurve::continuous(shifted.clone(), psi_ys)?;
    let g0_cum = MonotoneCurve::continuous(shifted, g_ys)?;

    let restart = InitialCondition::from_history(
        DensitySpec::Gridded { xs, values },
        psi0,
        g0_cum,
        g_density,
    )?;
    Ok(ExitDecision::Resume {
        restart,
        q_exit,
        exit_g,
    })
}

/// Total cumulative flux across pre-history, solved grid, and plateau.
fn segment_g_total(
    init: &InitialCondition,
    flux: &FluxCurve,
    plateau: &PlateauFlux,
    s1_local: f64,
    u: f64,
) -> f64 {
    if u <= 0.0 {
        init.g0_cum.eval(u)
    } else if u < s1_local {
        init.refractory_mass + flux.eval_g_cum(u)
    } else {
        init.refractory_mass + plateau_interp(&plateau.sigmas, &plateau.g_cum, u)
    }
}

/// Flux density across the same three ranges.
fn segment_g_density(
    init: &InitialCondition,
    flux: &FluxCurve,
    plateau: &PlateauFlux,
    s1_local: f64,
    u: f64,
) -> f64 {
    if u <= 0.0 {
        // interpolate the pre-history density samples
        let xs = init.g0_cum.xs();
        let hi = xs.partition_point(|&x| x <= u).min(xs.len() - 1);
        let lo = hi.saturating_sub(1);
        if hi == 0 || xs[hi] == xs[lo] {
            return init.g0_density[hi];
        }
        let t = (u - xs[lo]) / (xs[hi] - xs[lo]);
        init.g0_density[lo] + t * (init.g0_density[hi] - init.g0_density[lo])
    } else if u < s1_local {
        flux.eval_g(u)
    } else {
        plateau_interp(&plateau.sigmas, &plateau.g, u)
    }
}

fn plateau_interp(xs: &[f64], ys: &[f64], u: f64) -> f64 {
    if u <= xs[0] {
        return ys[0];
    }
    if u >= *xs.last().unwrap() {
        return *ys.last().unwrap();
    }
    let hi = xs.partition_point(|&x| x <= u);
    let lo = hi - 1;
    let t = (u - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] + t * (ys[hi] - ys[lo])
}

/// Least-squares fit of `log f` against `log(t1 - t)` on the approach to a
/// confirmed full blowup; returns `(slope, amplitude)`. The divergence law
/// predicts slope -1/2.
pub fn divergence_fit(
    psi_vals: &[f64],
    flux: &FluxCurve,
    params: &ModelParams,
    s1: f64,
    t1: f64,
    a_hint: f64,
) -> Result<(f64, f64)> {
    let step = flux.sigma_step;
    let n_end = ((s1 / step).floor() as usize).min(flux.g.len() - 1);
    // skip the last cells (onset refinement dominates there) and cap the
    // window so the subleading 1 - nu*a*(s1 - sigma) correction stays small
    let skip = 3usize;
    if n_end < skip + 20 {
        return Err(Error::numerical(
            "insufficient window resolution for the divergence fit (need >= 20 samples)",
        ));
    }
    let d_cap = if a_hint > 0.0 {
        0.2 / (params.nu * a_hint)
    } else {
        f64::INFINITY
    };
    let cap_points = ((d_cap / step).floor() as usize).min(60).max(20);
    let lo = n_end.saturating_sub(skip + cap_points);
    let mut log_dt = Vec::new();
    let mut log_f = Vec::new();
    for i in lo..=n_end - skip {
        let g = flux.g[i];
        let denom = 1.0 - params.lambda * g;
        let t = psi_vals[i];
        if denom <= 0.0 || t1 - t <= 0.0 {
            continue;
        }
        let f = params.nu * g / denom;
        if f <= 0.0 {
            continue;
        }
        log_dt.push((t1 - t).ln());
        log_f.push(f.ln());
    }
    if log_dt.len() < 20 {
        return Err(Error::numerical(
            "insufficient window resolution for the divergence fit (need >= 20 samples)",
        ));
    }
    let (slope, _) = linear_fit_slope(&log_dt, &log_f);
    let n = log_dt.len() as f64;
    let mx = log_dt.iter().sum::<f64>() / n;
    let my = log_f.iter().sum::<f64>() / n;
    let intercept = my - slope * mx;
    Ok((slope, intercept.exp()))
}
