//! The monotone-function calculus of the time change and the block-wise
//! contraction solver.
//!
//! The inverse time change `Psi` solves `Psi = S_delta[(id - lambda*G[Psi])/nu]`
//! where `G[Psi]` is the cumulative flux of the delayed renewal dynamics and
//! `S_delta` is the running-supremum regularization. Because every delay is
//! bounded below by `nu*epsilon`, the renewal feedback needs no data newer
//! than one block behind the front: Picard iteration contracts on blocks of
//! length `nu*epsilon`, and the solved prefix is frozen block by block.
//!
//! Blowups appear as the raw slope `(1 - lambda*g)/nu` sinking through the
//! regularization floor; the solver then refines `delta` down a schedule and
//! reports the onset for the blowup module to resolve.

use crate::blowup::BlowupEvent;
use crate::curve::{Continuity, MonotoneCurve};
use crate::error::Error;
use crate::init::InitialCondition;
use crate::params::{GridSpec, ModelParams};
use crate::renewal::{self, FluxCurve};
use crate::Result;
use serde::{Deserialize, Serialize};

/// Default Picard tolerance (sup norm per block).
pub const PICARD_TOL: f64 = 1e-10;
/// Default Picard iteration cap.
pub const PICARD_MAX_ITER: usize = 200;
/// Regularization floor, scaled by 1/nu in [`delta_schedule`].
pub const DELTA_MIN_SCALE: f64 = 1e-4;

/// Backward/forward delay data sampled on a sigma grid.
///
/// `xi(sigma) = Phi(Psi(sigma) - epsilon)` is the backward function (last
/// reset-eligible inactivation time), `eta = id - xi` the backward delay,
/// `tau` the left-continuous generalized inverse of `xi` (the reset time of
/// an inactivation), and `gamma = tau - id` the forward delay.
#[derive(Debug, Clone)]
pub struct DelayFunctions {
    /// Grid abscissae (sigma >= 0) where the delays are sampled.
    pub sigmas: Vec<f64>,
    /// Backward delay `eta(sigma_j) >= nu*epsilon`.
    pub eta: Vec<f64>,
    /// Backward function values `xi(sigma_j)`, nondecreasing, `xi(0) = xi0`.
    pub xi_vals: Vec<f64>,
    /// Forward function as a curve over the xi-image grid (left-continuous).
    pub tau: MonotoneCurve,
    /// `tau(xi_j)` per grid point.
    pub tau_at_xi: Vec<f64>,
    /// `gamma(xi_j) = tau(xi_j) - xi_j` per grid point.
    pub gamma_at_xi: Vec<f64>,
}

impl DelayFunctions {
    /// Restrict the sampled delays to the first `n` grid points.
    pub fn prefix(&self, n: usize) -> DelayFunctions {
        let n = n.min(self.sigmas.len());
        DelayFunctions {
            sigmas: self.sigmas[..n].to_vec(),
            eta: self.eta[..n].to_vec(),
            xi_vals: self.xi_vals[..n].to_vec(),
            tau: self.tau.clone(),
            tau_at_xi: self.tau_at_xi[..n].to_vec(),
            gamma_at_xi: self.gamma_at_xi[..n].to_vec(),
        }
    }

    /// Synthetic constant backward delay `eta == c` (so `xi = id - c`,
    /// `tau(u) = u + c`, `gamma == c`). Used by the renewal oracle tests.
    pub fn constant(c: f64, sigmas: Vec<f64>) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::validation("constant delay must be positive"));
        }
        let xi_vals: Vec<f64> = sigmas.iter().map(|&s| s - c).collect();
        let tau = MonotoneCurve::with_jumps(
            xi_vals.clone(),
            sigmas.clone(),
            Continuity::LeftContinuous,
        )?;
        let n = sigmas.len();
        Ok(DelayFunctions {
            eta: vec![c; n],
            tau_at_xi: sigmas.clone(),
            gamma_at_xi: vec![c; n],
            sigmas,
            xi_vals,
            tau,
        })
    }
}

/// Sample the delay functions induced by a full inverse time change (with
/// pre-history attached) on the given grid.
pub fn delays_of(psi: &MonotoneCurve, epsilon: f64, sigmas: &[f64]) -> Result<DelayFunctions> {
    let (lo, hi) = psi.domain();
    let end = *sigmas.last().unwrap();
    if hi < end {
        return Err(Error::validation(format!(
            "psi covers [{lo}, {hi}] but delays requested up to {end}"
        )));
    }
    let mut xi_vals = Vec::with_capacity(sigmas.len());
    let mut eta = Vec::with_capacity(sigmas.len());
    for &s in sigmas {
        let t = psi.eval(s) - epsilon;
        // Phi = right-continuous generalized inverse of Psi
        let x = psi.inverse_eval_right(t);
        xi_vals.push(x);
        eta.push(s - x);
    }
    // enforce monotonicity against roundoff at plateau seams
    for i in 1..xi_vals.len() {
        if xi_vals[i] < xi_vals[i - 1] {
            xi_vals[i] = xi_vals[i - 1];
        }
    }
    let tau = MonotoneCurve::with_jumps(
        xi_vals.clone(),
        sigmas.to_vec(),
        Continuity::LeftContinuous,
    )?;
    let tau_at_xi: Vec<f64> = xi_vals.iter().map(|&u| tau.eval(u)).collect();
    let gamma_at_xi: Vec<f64> = tau_at_xi
        .iter()
        .zip(&xi_vals)
        .map(|(&t, &u)| t - u)
        .collect();
    Ok(DelayFunctions {
        sigmas: sigmas.to_vec(),
        eta,
        xi_vals,
        tau,
        tau_at_xi,
        gamma_at_xi,
    })
}

/// Running-supremum regularization
/// `S_delta[psi](sigma) = sup_{0<=s<=sigma} { psi(s) - delta*s } + delta*sigma`.
///
/// Output difference quotients are >= delta; input is returned unchanged
/// wherever its quotients already clear delta. Exactly idempotent.
pub fn sup_transform(sigmas: &[f64], vals: &[f64], delta: f64) -> Vec<f64> {
    debug_assert_eq!(sigmas.len(), vals.len());
    let mut out: Vec<f64> = Vec::with_capacity(vals.len());
    for (i, (&s, &v)) in sigmas.iter().zip(vals).enumerate() {
        if i == 0 {
            out.push(v);
        } else {
            // cascade form of the running supremum: exactly idempotent and
            // free of large-sigma cancellation
            let carried = out[i - 1] + delta * (s - sigmas[i - 1]);
            out.push(v.max(carried));
        }
    }
    out
}

/// Per-run numerical diagnostics.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Total monotonicity clamp applied to G (aborts above 1e-6).
    pub clamp_total: f64,
    /// Picard iterations used per accepted block.
    pub picard_iters: Vec<usize>,
    /// Residual sequence of the most recent block solve.
    pub last_residuals: Vec<f64>,
    /// Set when a measured residual ratio reached 1 (contraction in doubt).
    pub contraction_warning: bool,
}

/// Mutable state of the block-wise fixed-point solve, local to one smooth
/// segment (from its initial condition up to at most one blowup onset).
#[derive(Debug, Clone)]
pub struct SolverState {
    /// Full inverse time change: pre-history on [xi0, 0], solved grid beyond.
    pub psi: MonotoneCurve,
    /// Solved values on the sigma grid (S_delta-regularized).
    pub psi_vals: Vec<f64>,
    /// Raw fixed-point values `(sigma - lambda G)/nu` on the grid.
    pub psi_raw: Vec<f64>,
    /// Cumulative flux and flux density on the grid.
    pub flux: FluxCurve,
    /// Current regularization parameter.
    pub delta: f64,
    /// Next block to solve.
    pub block_index: usize,
    /// Blowup events resolved so far (filled by the blowup module).
    pub events: Vec<BlowupEvent>,
    pub diagnostics: Diagnostics,
}

/// How a segment solve ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Termination {
    /// Smooth through the requested horizon.
    HorizonReached,
    /// Raw slope sank through the schedule floor: blowup onset detected.
    Blowup {
        /// Refined onset (local sigma coordinates).
        s1: f64,
        /// Original-time onset `t1 = Psi(s1)`.
        t1: f64,
        /// First grid index at or past the onset.
        grid_index: usize,
    },
}

/// Iteration controls (defaults pinned by the solver contract).
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: PICARD_TOL,
            max_iter: PICARD_MAX_ITER,
        }
    }
}

/// Geometric regularization schedule `delta0 * 2^-k` down to `1e-4 / nu`,
/// seeded at half the initial raw slope.
pub fn delta_schedule(init: &InitialCondition, params: &ModelParams) -> Vec<f64> {
    let boundary_flux = init.q0.boundary_slope().map(|s| s / 2.0).unwrap_or(0.0);
    let slope0 = (1.0 - params.lambda * boundary_flux) / params.nu;
    let delta_min = DELTA_MIN_SCALE / params.nu;
    let mut d = 0.5 * slope0;
    let mut out = Vec::new();
    while d > delta_min {
        out.push(d);
        d *= 0.5;
    }
    out.push(delta_min);
    out
}

impl SolverState {
    /// Fresh state at sigma = 0 from an initial condition.
    pub fn new(init: &InitialCondition, grid: &GridSpec, delta: f64) -> Result<Self> {
        let psi = build_psi_curve(init, &[], &[])?;
        Ok(SolverState {
            psi,
            psi_vals: vec![0.0],
            psi_raw: vec![0.0],
            flux: FluxCurve::empty(grid.sigma_step),
            delta,
            block_index: 0,
            events: Vec::new(),
            diagnostics: Diagnostics::default(),
        })
    }

    /// Number of solved grid points past sigma = 0.
    pub fn solved_len(&self) -> usize {
        self.psi_vals.len()
    }

    /// Grid abscissae 0, step, 2*step, ... for the first `n` points.
    pub fn sigmas(&self, n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 * self.flux.sigma_step).collect()
    }
}

/// Assemble the full Psi curve: pre-history samples on [xi0, 0], then the
/// solved grid values (sigma_0 = 0 is shared with the pre-history).
pub fn build_psi_curve(
    init: &InitialCondition,
    sigmas: &[f64],
    vals: &[f64],
) -> Result<MonotoneCurve> {
    let mut xs = init.psi0.xs().to_vec();
    let mut ys = init.psi0.ys().to_vec();
    debug_assert!(ys.last().map(|&v| v == 0.0).unwrap_or(false) || init.psi0.range().1 == 0.0);
    for (&s, &v) in sigmas.iter().zip(vals) {
        if s <= 0.0 {
            continue;
        }
        // guard monotone against roundoff
        let v = if v < *ys.last().unwrap() {
            *ys.last().unwrap()
        } else {
            v
        };
        xs.push(s);
        ys.push(v);
    }
    MonotoneCurve::continuous(xs, ys)
}

/// One application of the regularized fixed-point map on the current front:
/// computes `G[Psi]` from the delays of the assembled curve and returns
/// `S_delta[(id - lambda G)/nu]` together with the flux it used.
///
/// `upto` is the number of grid points to produce (prefix of the grid).
pub fn apply_f_delta(
    state: &SolverState,
    init: &InitialCondition,
    params: &ModelParams,
    grid: &GridSpec,
    sources: &renewal::SourceTable,
    psi_vals: &[f64],
    upto: usize,
) -> Result<(Vec<f64>, Vec<f64>, FluxCurve)> {
    let step = grid.sigma_step;
    let sigmas: Vec<f64> = (0..upto).map(|i| i as f64 * step).collect();
    let psi_full = build_psi_curve(init, &sigmas, psi_vals)?;
    let delays = delays_of(&psi_full, params.epsilon, &sigmas)?;
    let frozen = state.flux.len().min(state.solved_len().min(upto));
    let flux = renewal::solve_g_extend(&state.flux, frozen, &delays, init, params, sources)?;
    let mut raw = Vec::with_capacity(upto);
    for (i, &s) in sigmas.iter().enumerate() {
        raw.push((s - params.lambda * flux.g_cum[i]) / params.nu);
    }
    let regular = sup_transform(&sigmas, &raw, state.delta);
    Ok((regular, raw, flux))
}

/// Outcome of one block solve.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockOutcome {
    Smooth,
    /// Raw slope reached the current delta inside the block.
    SlopeFloor {
        first_index: usize,
    },
}

/// Picard-iterate the regularized map on the next block (length nu*epsilon)
/// until the sup-norm update drops below tolerance.
pub fn solve_block(
    state: &mut SolverState,
    init: &InitialCondition,
    params: &ModelParams,
    grid: &GridSpec,
    sources: &renewal::SourceTable,
    opts: &SolverOptions,
    horizon_points: usize,
) -> Result<BlockOutcome> {
    let per_block = grid.steps_per_block(params);
    let b0 = state.solved_len() - 1; // index of block start (already solved)
    let b1 = (b0 + per_block).min(horizon_points - 1);
    assert!(b1 > b0, "horizon already reached");

    // initial guess: continue at the last accepted slope
    let step = grid.sigma_step;
    let last_slope = if b0 == 0 {
        (1.0 - params.lambda * state.flux.g.first().copied().unwrap_or(0.0)) / params.nu
    } else {
        ((state.psi_vals[b0] - state.psi_vals[b0 - 1]) / step).max(0.0)
    };
    let mut vals = state.psi_vals.clone();
    for i in b0 + 1..=b1 {
        vals.push(vals[i - 1] + last_slope * step);
    }

    let mut residuals = Vec::new();
    let mut converged = false;
    let mut flux_next = state.flux.clone();
    let mut raw_next = state.psi_raw.clone();
    for _iter in 0..opts.max_iter {
        let (regular, raw, flux) =
            apply_f_delta(state, init, params, grid, sources, &vals, b1 + 1)?;
        let mut res = 0.0f64;
        for i in b0 + 1..=b1 {
            res = res.max((regular[i] - vals[i]).abs());
        }
        // frozen prefix must be untouched by the idempotent transform
        for i in 0..=b0 {
            debug_assert!((regular[i] - vals[i]).abs() < 1e-9);
        }
        vals = regular;
        raw_next = raw;
        flux_next = flux;
        residuals.push(res);
        if res < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::MaxIter {
            max_iter: opts.max_iter,
            residual: residuals.last().copied().unwrap_or(f64::NAN),
        });
    }
    // contraction bookkeeping: ratios of successive residuals
    for w in residuals.windows(2) {
        if w[0] > 1e-14 && w[1] / w[0] >= 1.0 {
            state.diagnostics.contraction_warning = true;
        }
    }
    state.diagnostics.last_residuals = residuals.clone();
    state.diagnostics.picard_iters.push(residuals.len());

    state.psi_vals = vals;
    state.psi_raw = raw_next;
    state.flux = flux_next;
    state.psi = build_psi_curve(
        init,
        &state.sigmas(state.psi_vals.len()),
        &state.psi_vals,
    )?;

    // slope check against the regularization floor, via the flux density
    let mut first_floor = None;
    for i in b0 + 1..=b1 {
        let slope = (1.0 - params.lambda * state.flux.g[i]) / params.nu;
        if slope <= state.delta {
            first_floor = Some(i);
            break;
        }
    }
    state.block_index += 1;
    match first_floor {
        Some(i) => Ok(BlockOutcome::SlopeFloor { first_index: i }),
        None => Ok(BlockOutcome::Smooth),
    }
}

/// Solved segment: smooth solution up to horizon or first blowup onset.
#[derive(Debug)]
pub struct Segment {
    pub state: SolverState,
    pub termination: Termination,
}

/// Solve from an initial condition until the horizon or the first blowup.
///
/// Runs block-by-block; when the raw slope `(1 - lambda g)/nu` sinks to the
/// current `delta`, the same block is re-solved with the next (smaller)
/// `delta` from the schedule; at the schedule floor the crossing is declared
/// a blowup onset, refined by local quadratic interpolation of `g`, and the
/// state is truncated at the onset.
pub fn solve_until_blowup(
    init: &InitialCondition,
    params: &ModelParams,
    grid: &GridSpec,
    schedule: &[f64],
    opts: &SolverOptions,
) -> Result<Segment> {
    let grid_n = grid.normalized(params);
    let state = SolverState::new(init, &grid_n, *schedule.first().unwrap_or(&f64::NAN))?;
    solve_from_state(state, init, params, grid, schedule, opts)
}

/// Continue a (possibly checkpoint-restored) state to the horizon or blowup.
pub fn solve_from_state(
    mut state: SolverState,
    init: &InitialCondition,
    params: &ModelParams,
    grid: &GridSpec,
    schedule: &[f64],
    opts: &SolverOptions,
) -> Result<Segment> {
    if schedule.is_empty() || schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::validation("delta schedule must be strictly decreasing"));
    }
    init.no_instant_blowup(params.lambda)?;
    let grid = grid.normalized(params);
    let n_points = (grid.horizon_sigma / grid.sigma_step).floor() as usize + 1;
    let sources = renewal::SourceTable::build(init, grid.sigma_step, n_points);
    let mut schedule_pos = schedule
        .iter()
        .position(|&d| d <= state.delta)
        .unwrap_or(schedule.len() - 1);
    state.delta = schedule[schedule_pos];

    while state.solved_len() < n_points {
        let saved = (
            state.psi_vals.clone(),
            state.psi_raw.clone(),
            state.flux.clone(),
            state.block_index,
        );
        match solve_block(&mut state, init, params, &grid, &sources, opts, n_points)? {
            BlockOutcome::Smooth => {}
            BlockOutcome::SlopeFloor { first_index } => {
                if schedule_pos + 1 < schedule.len() {
                    // refine delta and redo the same block
                    schedule_pos += 1;
                    state.delta = schedule[schedule_pos];
                    state.psi_vals = saved.0;
                    state.psi_raw = saved.1;
                    state.flux = saved.2;
                    state.block_index = saved.3;
                    continue;
                }
                return finish_blowup(state, init, params, &grid, first_index);
            }
        }
    }
    Ok(Segment {
        state,
        termination: Termination::HorizonReached,
    })
}

/// Refine the onset location and truncate the state at it.
fn finish_blowup(
    mut state: SolverState,
    init: &InitialCondition,
    params: &ModelParams,
    grid: &GridSpec,
    idx: usize,
) -> Result<Segment> {
    let step = grid.sigma_step;
    let target = 1.0 / params.lambda;
    let g = &state.flux.g;

    // grid-resolution guard: g must approach the threshold gradually
    if idx >= 1 {
        let jump = g[idx] - g[idx - 1];
        if jump > 0.5 * target {
            let hint = step * 0.1 * target / jump;
            return Err(Error::numerical(format!(
                "flux density jumps by {jump:.3e} in one step near the onset (threshold \
                 {target:.3e}); refine sigma_step to ~{hint:.2e}"
            )));
        }
    }

    let s1 = refine_crossing(&state.sigmas(g.len()), g, idx, target);
    let t1 = state.psi.eval(s1.min((g.len() - 1) as f64 * step));

    // truncate solved data to the last grid point strictly before s1
    let keep = ((s1 / step).floor() as usize).min(state.psi_vals.len() - 1);
    state.psi_vals.truncate(keep + 1);
    state.psi_raw.truncate(keep + 1);
    state.flux.truncate(keep + 1);
    state.psi = build_psi_curve(init, &state.sigmas(keep + 1), &state.psi_vals)?;

    Ok(Segment {
        state,
        termination: Termination::Blowup {
            s1,
            t1,
            grid_index: keep,
        },
    })
}

/// Quadratic interpolation of the first crossing of `g` through `target`
/// around grid index `idx`.
pub(crate) fn refine_crossing(sigmas: &[f64], g: &[f64], idx: usize, target: f64) -> f64 {
    if idx < 2 {
        return sigmas[idx];
    }
    // fit a parabola through the last three samples up to idx
    let (s0, s1, s2) = (sigmas[idx - 2], sigmas[idx - 1], sigmas[idx]);
    let (g0, g1, g2) = (g[idx - 2], g[idx - 1], g[idx]);
    let h = s1 - s0;
    // Newton form on a uniform grid: g(s) = g0 + d1 (s - s0)/h + d2 (s-s0)(s-s1)/(2h^2)
    let d1 = g1 - g0;
    let d2 = g2 - 2.0 * g1 + g0;
    // solve g(s) = target on [s1, s2] (fall back to secant)
    let mut lo = s0;
    let mut hi = s2 + h;
    let f = |s: f64| {
        let u = (s - s0) / h;
        g0 + d1 * u + 0.5 * d2 * u * (u - 1.0) - target
    };
    if f(lo) > 0.0 {
        return sigmas[idx.saturating_sub(2)];
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Versioned checkpoint of a solver state (text format, resumable).
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub psi: MonotoneCurve,
    pub psi_vals: Vec<f64>,
    pub psi_raw: Vec<f64>,
    pub flux: FluxCurve,
    pub delta: f64,
    pub block_index: usize,
    pub events: Vec<BlowupEvent>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialize the state to the documented checkpoint format (JSON, version 1).
pub fn save_checkpoint(state: &SolverState) -> String {
    let cp = Checkpoint {
        version: CHECKPOINT_VERSION,
        psi: state.psi.clone(),
        psi_vals: state.psi_vals.clone(),
        psi_raw: state.psi_raw.clone(),
        flux: state.flux.clone(),
        delta: state.delta,
        block_index: state.block_index,
        events: state.events.clone(),
    };
    serde_json::to_string(&cp).expect("checkpoint serialization cannot fail")
}

/// Restore a state saved by [`save_checkpoint`].
pub fn load_checkpoint(text: &str) -> Result<SolverState> {
    let cp: Checkpoint =
        serde_json::from_str(text).map_err(|e| Error::config(format!("checkpoint: {e}")))?;
    if cp.version != CHECKPOINT_VERSION {
        return Err(Error::config(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            cp.version
        )));
    }
    Ok(SolverState {
        psi: cp.psi,
        psi_vals: cp.psi_vals,
        psi_raw: cp.psi_raw,
        flux: cp.flux,
        delta: cp.delta,
        block_index: cp.block_index,
        events: cp.events,
        diagnostics: Diagnostics::default(),
    })
}
