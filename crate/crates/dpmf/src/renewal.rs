//! The quasi-renewal Volterra equation for the cumulative flux, and a Monte
//! Carlo oracle simulating the underlying inhomogeneous renewal process.
//!
//! Given delay functions and initial data, the cumulative flux solves
//!
//! ```text
//! G(sigma) = int H(sigma, x) q0(x) dx + int_0^sigma H(sigma - tau, Lambda) dG(xi(tau)),
//! ```
//!
//! with `G = G0` on the pre-history. The Stieltjes term is integrated by a
//! product trapezoid rule *in the image coordinate* `u = xi(tau)` through the
//! forward curve `tau(u)`: flats of `xi` contribute zero mass and jumps of
//! `xi` (post-blowup reset bursts) collapse to single well-placed increments.
//! Because every backward delay is at least `nu*epsilon`, `G` on a block only
//! references values at least one block old, so each block is an explicit
//! (not implicit) sweep and grid points can be evaluated in parallel.

use crate::error::Error;
use crate::exec;
use crate::init::InitialCondition;
use crate::kernels;
use crate::params::{GridSpec, ModelParams};
use crate::timechange::DelayFunctions;
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Abort threshold for accumulated monotonicity clamps on G.
pub const CLAMP_ABORT: f64 = 1e-6;

/// Cumulative flux `G` (anchored `G(0) = 0`) and flux density `g` on a
/// uniform sigma grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxCurve {
    pub sigma_step: f64,
    pub g_cum: Vec<f64>,
    pub g: Vec<f64>,
    /// Total monotonicity clamp applied (diagnostics).
    pub clamp_total: f64,
}

impl FluxCurve {
    pub fn empty(sigma_step: f64) -> Self {
        FluxCurve {
            sigma_step,
            g_cum: vec![0.0],
            g: vec![0.0],
            clamp_total: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.g_cum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g_cum.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.g_cum.truncate(n);
        self.g.truncate(n);
    }

    /// Linear interpolation of G at `u >= 0` within the solved range.
    pub fn eval_g_cum(&self, u: f64) -> f64 {
        debug_assert!(u >= 0.0);
        let pos = u / self.sigma_step;
        let i = (pos.floor() as usize).min(self.g_cum.len() - 1);
        if i + 1 >= self.g_cum.len() {
            return *self.g_cum.last().unwrap();
        }
        let t = pos - i as f64;
        self.g_cum[i] + t * (self.g_cum[i + 1] - self.g_cum[i])
    }

    /// Linear interpolation of the flux density at `u >= 0`.
    pub fn eval_g(&self, u: f64) -> f64 {
        debug_assert!(u >= 0.0);
        let pos = u / self.sigma_step;
        let i = (pos.floor() as usize).min(self.g.len() - 1);
        if i + 1 >= self.g.len() {
            return *self.g.last().unwrap();
        }
        let t = pos - i as f64;
        self.g[i] + t * (self.g[i + 1] - self.g[i])
    }
}

/// Precomputed first-passage sources `(int H(sigma_n,x) q0 dx, int h(sigma_n,x) q0 dx)`
/// per grid index. These never change across Picard iterations.
#[derive(Debug, Clone)]
pub struct SourceTable {
    pub cdf: Vec<f64>,
    pub pdf: Vec<f64>,
}

impl SourceTable {
    pub fn build(init: &InitialCondition, sigma_step: f64, n_points: usize) -> Self {
        let rows = exec::map_collect(n_points, |i| {
            let s = i as f64 * sigma_step;
            (init.source_cdf(s), init.source_pdf(s))
        });
        let cdf: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let mut pdf: Vec<f64> = rows.iter().map(|r| r.1).collect();
        // the sigma -> 0+ limit of the density source is the boundary flux
        if !pdf.is_empty() {
            pdf[0] = Self::pdf_at_zero(init);
        }
        SourceTable { cdf, pdf }
    }

    /// Boundary-flux limit of the density source at sigma = 0+.
    pub fn pdf_at_zero(init: &InitialCondition) -> f64 {
        init.q0.boundary_slope().map(|s| s / 2.0).unwrap_or(0.0)
    }
}

/// Evaluate the total cumulative flux at `u`, joining the pre-history
/// (shifted so increments are continuous across the seam at 0).
fn eval_g_total(init: &InitialCondition, flux_prefix: &FluxCurve, u: f64) -> f64 {
    if u <= 0.0 {
        init.g0_cum.eval(u)
    } else {
        init.refractory_mass + flux_prefix.eval_g_cum(u)
    }
}

/// Extend a flux curve to the full delay grid, keeping `frozen` prefix points.
///
/// Grid points in the extension only read `G` at arguments at least one
/// delay floor behind, i.e. inside the frozen prefix or the pre-history, so
/// the extension is evaluated in parallel.
pub fn solve_g_extend(
    prev: &FluxCurve,
    frozen: usize,
    delays: &DelayFunctions,
    init: &InitialCondition,
    params: &ModelParams,
    sources: &SourceTable,
) -> Result<FluxCurve> {
    let n_total = delays.sigmas.len();
    let step = if delays.sigmas.len() >= 2 {
        delays.sigmas[1] - delays.sigmas[0]
    } else {
        prev.sigma_step
    };
    let frozen = frozen.min(prev.len()).min(n_total);

    let mut flux = FluxCurve {
        sigma_step: step,
        g_cum: prev.g_cum[..frozen].to_vec(),
        g: prev.g[..frozen].to_vec(),
        clamp_total: prev.clamp_total,
    };
    if frozen == 0 {
        flux.g_cum.push(0.0);
        flux.g.push(SourceTable::pdf_at_zero(init));
    }
    let start = flux.len();

    // G evaluated at the image nodes u_j = xi(sigma_j); all u_j lie at least
    // one block behind the extension, hence inside `flux`'s prefix.
    let g_at_u: Vec<f64> = delays
        .xi_vals
        .iter()
        .map(|&u| eval_g_total(init, &flux, u))
        .collect();

    let lam = params.reset_level;
    let rows: Vec<(f64, f64)> = exec::map_collect(n_total - start, |k| {
        let n = start + k;
        let sn = delays.sigmas[n];
        let mut acc_h = 0.0;
        let mut acc_d = 0.0;
        let mut k_prev = kernels::fp_cdf(sn - delays.tau_at_xi[0], lam);
        let mut d_prev = kernels::fp_pdf(sn - delays.tau_at_xi[0], lam);
        for j in 0..n {
            let k_next = kernels::fp_cdf(sn - delays.tau_at_xi[j + 1], lam);
            let d_next = kernels::fp_pdf(sn - delays.tau_at_xi[j + 1], lam);
            let dg = g_at_u[j + 1] - g_at_u[j];
            acc_h += 0.5 * (k_prev + k_next) * dg;
            acc_d += 0.5 * (d_prev + d_next) * dg;
            k_prev = k_next;
            d_prev = d_next;
        }
        (sources.cdf[n] + acc_h, sources.pdf[n] + acc_d)
    });

    for (g_cum, g) in rows {
        let prev_val = *flux.g_cum.last().unwrap();
        if g_cum < prev_val {
            flux.clamp_total += prev_val - g_cum;
            flux.g_cum.push(prev_val);
        } else {
            flux.g_cum.push(g_cum);
        }
        flux.g.push(g.max(0.0));
    }
    if flux.clamp_total > CLAMP_ABORT {
        return Err(Error::numerical(format!(
            "negative flux increments exceeded clamp budget: {:.3e}",
            flux.clamp_total
        )));
    }
    Ok(flux)
}

/// Solve the quasi-renewal equation for `G` on the delay grid from scratch.
///
/// Marches in chunks bounded by the delay floor: each chunk's image nodes
/// stay inside the previously solved prefix, so the recurrence is explicit.
pub fn solve_g(
    delays: &DelayFunctions,
    init: &InitialCondition,
    params: &ModelParams,
    grid: &GridSpec,
) -> Result<FluxCurve> {
    if grid.sigma_step >= params.block_len() {
        return Err(Error::validation(
            "grid too coarse: sigma_step must be below nu*epsilon",
        ));
    }
    let n_total = delays.sigmas.len();
    let sources = SourceTable::build(init, grid.sigma_step, n_total);
    let eta_min = delays.eta.iter().cloned().fold(f64::INFINITY, f64::min);
    if eta_min <= grid.sigma_step {
        return Err(Error::validation(format!(
            "grid too coarse: minimum backward delay {eta_min} must exceed sigma_step"
        )));
    }
    let chunk = ((eta_min / grid.sigma_step - 1e-9).floor() as usize).max(1);
    let mut flux = FluxCurve::empty(grid.sigma_step);
    let mut frozen = 0usize;
    while flux.len() < n_total {
        let upto = (flux.len() + chunk).min(n_total);
        let delays_prefix = delays.prefix(upto);
        flux = solve_g_extend(&flux, frozen, &delays_prefix, init, params, &sources)?;
        frozen = flux.len();
    }
    Ok(flux)
}

/// Zero-delay majorant series `sum_k H(sigma, x0 + (k-1) Lambda)`, truncated
/// when terms drop below 1e-14. Dominates the flux of any delayed dynamics
/// started from an atom at `x0` with empty refractory history.
pub fn series_g_upper_bound(sigma: f64, x0: f64, reset_level: f64) -> f64 {
    assert!(sigma >= 0.0 && x0 > 0.0 && reset_level > 0.0);
    let mut total = 0.0;
    for k in 0..10_000 {
        let term = kernels::fp_cdf(sigma, x0 + k as f64 * reset_level);
        total += term;
        if term < 1e-14 {
            break;
        }
    }
    total
}

/// Empirical flux estimate with a pointwise standard-error band.
#[derive(Debug, Clone)]
pub struct McFluxCurve {
    pub sigmas: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_paths: usize,
}

const MC_BATCH: usize = 1 << 12;

/// Monte Carlo oracle: simulate the time-inhomogeneous renewal sequence
/// driven by first-passage epochs and the forward delays, and return the
/// mean count curve with its standard error.
///
/// Paths are drawn in fixed-size batches from per-batch ChaCha streams and
/// merged in batch order, so the result is bit-identical for a given seed
/// regardless of the execution mode or worker count. The interaction
/// coupling never enters: the oracle depends only on delays and initial data.
pub fn mc_renewal_oracle(
    delays: &DelayFunctions,
    init: &InitialCondition,
    reset_level: f64,
    n_paths: usize,
    grid: &GridSpec,
    seed: u64,
) -> Result<McFluxCurve> {
    if n_paths < 1_000 {
        return Err(Error::validation("oracle needs at least 1e3 paths"));
    }
    let step = grid.sigma_step;
    let horizon = *delays.sigmas.last().unwrap();
    let n_bins = delays.sigmas.len();

    let active_mass = init.active_mass;
    let total_mass = init.active_mass + init.refractory_mass;
    let n_batches = n_paths.div_ceil(MC_BATCH);

    // per-batch (count diff, squared-count diff) accumulators
    let batches: Vec<(Vec<f64>, Vec<f64>)> = exec::map_collect(n_batches, |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64 + 1);
        let paths_here = MC_BATCH.min(n_paths - b * MC_BATCH);
        let mut d1 = vec![0.0f64; n_bins];
        let mut d2 = vec![0.0f64; n_bins];
        for _ in 0..paths_here {
            let mut events_before = 0usize;
            // classify the path
            let cls: f64 = rng.random::<f64>() * total_mass;
            let mut next_start: Option<(f64, f64)>; // (reset time, start level)
            if cls < active_mass {
                let x = init.q0.sample_state(rng.random::<f64>());
                next_start = Some((0.0, x));
            } else {
                // refractory: inactivated at xi_pre sampled from g0
                let u = rng.random::<f64>() * init.refractory_mass;
                let xi_pre = init.g0_cum.inverse_eval_right(u);
                let reset_at = delays.tau.eval(xi_pre);
                next_start = if reset_at <= horizon {
                    Some((reset_at, f64::NAN)) // NaN marks reset level
                } else {
                    None
                };
            }
            while let Some((t0, level)) = next_start {
                let x = if level.is_nan() { reset_level } else { level };
                let gap = kernels::fp_cdf_inv(rng.random::<f64>(), x);
                let e = t0 + gap;
                if e > horizon {
                    break;
                }
                // record the inactivation at e
                let bin = (e / step).ceil() as usize;
                if bin < n_bins {
                    d1[bin] += 1.0;
                    d2[bin] += 2.0 * events_before as f64 + 1.0;
                }
                events_before += 1;
                let reset_at = delays.tau.eval(e);
                next_start = if reset_at <= horizon {
                    Some((reset_at, f64::NAN))
                } else {
                    None
                };
            }
        }
        (d1, d2)
    });

    let mut sum = vec![0.0f64; n_bins];
    let mut sumsq = vec![0.0f64; n_bins];
    for (d1, d2) in batches {
        for j in 0..n_bins {
            sum[j] += d1[j];
            sumsq[j] += d2[j];
        }
    }
    // prefix sums turn per-bin increments into counts
    for j in 1..n_bins {
        sum[j] += sum[j - 1];
        sumsq[j] += sumsq[j - 1];
    }
    let n = n_paths as f64;
    let mut mean = Vec::with_capacity(n_bins);
    let mut stderr = Vec::with_capacity(n_bins);
    for j in 0..n_bins {
        let m = sum[j] / n;
        let var = ((sumsq[j] / n - m * m) * n / (n - 1.0)).max(0.0);
        mean.push(m);
        stderr.push((var / n).sqrt());
    }
    Ok(McFluxCurve {
        sigmas: delays.sigmas.clone(),
        mean,
        stderr,
        n_paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{build_initial, DensitySpec};
    use crate::kernels;
    use crate::quad;
    use approx::assert_abs_diff_eq;

    fn setup(x0: f64, lambda: f64) -> (ModelParams, GridSpec, InitialCondition) {
        let params = ModelParams {
            nu: 1.0,
            lambda,
            reset_level: 1.0,
            epsilon: 0.1,
        };
        let grid = GridSpec {
            sigma_step: 0.01,
            horizon_sigma: 4.0,
            x_step: 0.01,
            x_max: 10.0,
        };
        let init = build_initial(&params, DensitySpec::Atom { x0, mass: 1.0 }, None).unwrap();
        (params, grid, init)
    }

    fn grid_sigmas(grid: &GridSpec) -> Vec<f64> {
        let n = (grid.horizon_sigma / grid.sigma_step).floor() as usize + 1;
        (0..n).map(|i| i as f64 * grid.sigma_step).collect()
    }

    #[test]
    fn first_block_is_pure_first_passage() {
        // before one delay floor no reset mass can arrive: G = H(., x0)
        let (params, grid, init) = setup(1.0, 1.0);
        let delays = DelayFunctions::constant(params.block_len(), grid_sigmas(&grid)).unwrap();
        let flux = solve_g(&delays, &init, &params, &grid).unwrap();
        let nb = (params.block_len() / grid.sigma_step) as usize;
        for i in 0..=nb {
            let s = i as f64 * grid.sigma_step;
            assert_abs_diff_eq!(flux.g_cum[i], kernels::fp_cdf(s, 1.0), epsilon = 1e-12);
            assert_abs_diff_eq!(flux.g[i], kernels::fp_pdf(s, 1.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn monotone_and_majorant_dominated() {
        let (params, grid, init) = setup(1.0, 1.0);
        let delays = DelayFunctions::constant(0.25, grid_sigmas(&grid)).unwrap();
        let flux = solve_g(&delays, &init, &params, &grid).unwrap();
        for i in 1..flux.len() {
            assert!(flux.g_cum[i] >= flux.g_cum[i - 1], "G must be nondecreasing");
            assert!(flux.g[i] >= 0.0);
            let s = i as f64 * grid.sigma_step;
            let bound = series_g_upper_bound(s, 1.0, params.reset_level);
            assert!(
                flux.g_cum[i] <= bound + 1e-9,
                "majorant violated at {s}: {} > {bound}",
                flux.g_cum[i]
            );
        }
        // smoothness proxy: bounded second differences away from 0
        let h = grid.sigma_step;
        let start = (0.5 / h) as usize;
        for i in start..flux.len() - 1 {
            let dd = (flux.g_cum[i + 1] - 2.0 * flux.g_cum[i] + flux.g_cum[i - 1]) / (h * h);
            assert!(dd.abs() < 10.0, "second difference {dd} at index {i}");
        }
    }

    #[test]
    fn majorant_small_sigma_matches_first_term() {
        // higher terms are exponentially suppressed at small sigma
        let s = 0.05;
        let bound = series_g_upper_bound(s, 1.0, 1.0);
        assert_abs_diff_eq!(bound, kernels::fp_cdf(s, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn divisibility_feeds_majorant_recursion() {
        // H(sigma, x + Lambda) = int_0^sigma h(t, x) H(sigma - t, Lambda) dt
        let (s, x, lam) = (3.0, 1.0, 1.0);
        let conv = quad::integrate(|t| kernels::fp_pdf(t, x) * kernels::fp_cdf(s - t, lam), 0.0, s, 1e-11);
        assert_abs_diff_eq!(conv, kernels::fp_cdf(s, x + lam), epsilon = 1e-8);
    }

    #[test]
    fn oracle_matches_solver_constant_delays() {
        // three randomized constant-delay scenarios; fixed seeds keep the
        // sup-over-grid 3se band deterministic (a systematic solver bias
        // shows up at every seed, far outside the band)
        let configs = [(1.0f64, 0.25f64, 101u64), (0.7, 0.13, 203), (1.6, 0.4, 303)];
        for &(x0, c, seed) in &configs {
            let (params, grid, init) = setup(x0, 1.0);
            let delays = DelayFunctions::constant(c, grid_sigmas(&grid)).unwrap();
            let flux = solve_g(&delays, &init, &params, &grid).unwrap();
            let mc = mc_renewal_oracle(&delays, &init, params.reset_level, 100_000, &grid, seed)
                .unwrap();
            for i in 0..flux.len() {
                let band = 3.0 * mc.stderr[i] + 5.0 / mc.n_paths as f64;
                assert!(
                    (flux.g_cum[i] - mc.mean[i]).abs() <= band,
                    "x0={x0} c={c} sigma={}: solver {} vs mc {} (band {band})",
                    mc.sigmas[i],
                    flux.g_cum[i],
                    mc.mean[i]
                );
            }
        }
    }

    #[test]
    fn oracle_exact_series_constant_delays() {
        // with constant forward delay c, the legs convolve exactly:
        // P(xi_k <= sigma) = H(sigma - (k-1) c, x0 + (k-1) Lambda), so
        // E N(sigma) is the delayed series in closed form. Check the mean
        // count near sigma = x0 + c + Lambda (where the second term matters)
        // and the two-term decomposition via the divisibility identity.
        let (params, grid, init) = setup(1.0, 1.0);
        let c = 0.3;
        let delays = DelayFunctions::constant(c, grid_sigmas(&grid)).unwrap();
        let mc =
            mc_renewal_oracle(&delays, &init, params.reset_level, 200_000, &grid, 7).unwrap();
        let exact = |sigma: f64| -> f64 {
            let mut total = 0.0;
            for k in 0..1000 {
                let arg = sigma - k as f64 * c;
                if arg <= 0.0 {
                    break;
                }
                let term = kernels::fp_cdf(arg, 1.0 + k as f64 * params.reset_level);
                total += term;
                if term < 1e-12 {
                    break;
                }
            }
            total
        };
        for &sigma in &[0.5, 1.0, 1.0 + c + params.reset_level, 3.5] {
            let idx = (sigma / grid.sigma_step).round() as usize;
            let want = exact(mc.sigmas[idx]);
            let band = 3.0 * mc.stderr[idx] + 5.0 / mc.n_paths as f64;
            assert!(
                (mc.mean[idx] - want).abs() <= band,
                "sigma {sigma}: mc {} vs exact {want} (band {band})",
                mc.mean[idx]
            );
        }
        // two-term decomposition: second term = H(sigma - c, x0 + Lambda)
        let sigma = 1.0 + c + params.reset_level;
        let second = quad::integrate(
            |u| kernels::fp_pdf(u, 1.0) * kernels::fp_cdf(sigma - u - c, params.reset_level),
            0.0,
            sigma - c,
            1e-10,
        );
        assert_abs_diff_eq!(
            second,
            kernels::fp_cdf(sigma - c, 1.0 + params.reset_level),
            epsilon = 1e-8
        );
    }

    #[test]
    fn oracle_variance_scaling() {
        // doubling paths halves the variance: log-log slope of stderr ~ -1/2
        let (params, grid, init) = setup(1.0, 1.0);
        let grid = GridSpec {
            horizon_sigma: 2.0,
            ..grid
        };
        let delays = DelayFunctions::constant(0.25, grid_sigmas(&grid)).unwrap();
        let idx = (1.5 / grid.sigma_step) as usize;
        let mut ses = Vec::new();
        for &n in &[8_000usize, 32_000, 128_000] {
            let mc = mc_renewal_oracle(&delays, &init, params.reset_level, n, &grid, 55).unwrap();
            ses.push(mc.stderr[idx]);
        }
        let slope = (ses[2] / ses[0]).ln() / ((128_000f64 / 8_000f64).ln());
        assert!(
            (slope + 0.5).abs() < 0.1,
            "stderr scaling slope {slope}, stderrs {ses:?}"
        );
    }

    #[test]
    fn oracle_is_deterministic_and_lambda_free() {
        let (params, grid, init) = setup(1.0, 1.0);
        let grid = GridSpec {
            horizon_sigma: 1.0,
            ..grid
        };
        let delays = DelayFunctions::constant(0.2, grid_sigmas(&grid)).unwrap();
        let a = mc_renewal_oracle(&delays, &init, params.reset_level, 10_000, &grid, 9).unwrap();
        let b = mc_renewal_oracle(&delays, &init, params.reset_level, 10_000, &grid, 9).unwrap();
        assert_eq!(a.mean, b.mean);
        // lambda never enters: same init data under a different coupling
        let params2 = ModelParams {
            lambda: 99.0,
            ..params
        };
        let init2 = build_initial(&params2, DensitySpec::Atom { x0: 1.0, mass: 1.0 }, None).unwrap();
        let c = mc_renewal_oracle(&delays, &init2, params2.reset_level, 10_000, &grid, 9).unwrap();
        assert_eq!(a.mean, c.mean);
    }
}
