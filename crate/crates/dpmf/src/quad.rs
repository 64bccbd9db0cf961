//! Adaptive Gauss-Kronrod quadrature.
//!
//! Oracle-grade integration for the kernel identity checks and the moment
//! integrals. Production paths on fixed grids use plain trapezoids; this
//! module exists so that every oracle is more accurate than the quantity it
//! verifies. Plain 15-point Kronrod rule with recursive bisection.

/// Kronrod abscissae on [0, 1] side of the symmetric 15-point rule.
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144838258730,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];

/// Kronrod weights matching `XGK`.
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];

/// Weights of the embedded 7-point Gauss rule (on odd-index Kronrod nodes).
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// One Gauss-Kronrod 15 evaluation over [a, b]: returns (estimate, error bound).
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let half = 0.5 * (b - a);
    let center = 0.5 * (a + b);

    let fc = f(center);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;

    for i in 0..7 {
        let dx = half * XGK[i];
        let fsum = f(center - dx) + f(center + dx);
        kronrod += WGK[i] * fsum;
        if i % 2 == 1 {
            gauss += WG[i / 2] * fsum;
        }
    }
    kronrod *= half;
    gauss *= half;
    (kronrod, (kronrod - gauss).abs())
}

fn adapt<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32, out: &mut f64) {
    let (est, err) = gk15(f, a, b);
    if err <= tol || depth >= 60 {
        *out += est;
        return;
    }
    let mid = 0.5 * (a + b);
    adapt(f, a, mid, 0.5 * tol, depth + 1, out);
    adapt(f, mid, b, 0.5 * tol, depth + 1, out);
}

/// Integrate `f` over [a, b] to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    let mut out = 0.0;
    adapt(&f, a, b, tol.max(1e-15), 0, &mut out);
    out
}

/// Integrate over consecutive segments `[pts[0], pts[1]], [pts[1], pts[2]], ...`.
///
/// Interior breakpoints let the caller isolate kinks (e.g. the sign change of
/// an absolute-value integrand) so bisection does not chase them.
pub fn integrate_segments<F: Fn(f64) -> f64>(f: F, pts: &[f64], tol: f64) -> f64 {
    assert!(pts.len() >= 2, "need at least one segment");
    let per = tol / (pts.len() - 1) as f64;
    pts.windows(2).map(|w| integrate(&f, w[0], w[1], per)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn polynomial_is_exact() {
        let v = integrate(|x| 3.0 * x * x, 0.0, 2.0, 1e-12);
        assert_abs_diff_eq!(v, 8.0, epsilon = 1e-13);
    }

    #[test]
    fn gaussian_mass() {
        let v = integrate(
            |x| (-x * x / 2.0).exp() / (2.0 * PI).sqrt(),
            -12.0,
            12.0,
            1e-12,
        );
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn oscillatory() {
        // int_0^pi sin(10 x) dx = (1 - cos(10 pi)) / 10 = 0
        let v = integrate(|x| (10.0 * x).sin(), 0.0, PI, 1e-12);
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kinked_integrand_with_breakpoint() {
        let v = integrate_segments(|x: f64| x.abs(), &[-1.0, 0.0, 2.0], 1e-12);
        assert_abs_diff_eq!(v, 2.5, epsilon = 1e-12);
    }
}

/// Trapezoid rule on a sampled grid.
pub fn trapz(xs: &[f64], vals: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), vals.len());
    let mut acc = 0.0;
    for i in 1..xs.len() {
        acc += 0.5 * (vals[i] + vals[i - 1]) * (xs[i] - xs[i - 1]);
    }
    acc
}

/// Cumulative trapezoid rule; output[0] = 0.
pub fn cumtrapz(xs: &[f64], vals: &[f64]) -> Vec<f64> {
    debug_assert_eq!(xs.len(), vals.len());
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..xs.len() {
        acc += 0.5 * (vals[i] + vals[i - 1]) * (xs[i] - xs[i - 1]);
        out.push(acc);
    }
    out
}
