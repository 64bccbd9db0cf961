//! Sampled monotone functions with exact plateaus and generalized inverses.
//!
//! The time changes `Phi`, inverse time changes `Psi`, backward functions
//! `xi`, forward functions `tau`, and cumulative fluxes `G` are all
//! nondecreasing functions of one variable. A [`MonotoneCurve`] stores them as
//! ordered `(x, y)` samples with linear interpolation between samples and
//! exact breakpoint preservation:
//!
//! - a run of samples with *exactly* equal values is a plateau (the curve is
//!   constant there, not resampled);
//! - for non-continuous curves, two samples sharing an abscissa encode a jump.
//!
//! Plateaus of a curve become jumps of its generalized inverse and vice
//! versa, which is how blowups (flat `Psi`) turn into synchronous events
//! (jumps of `Phi`).

use crate::error::Error;
use crate::Result;
use serde::{Deserialize, Serialize};

/// Which one-sided limit a curve takes at a jump.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Continuity {
    Continuous,
    RightContinuous,
    LeftContinuous,
}

/// A maximal interval `[start, end]` on which the curve equals `value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub start: f64,
    pub end: f64,
    pub value: f64,
}

/// A sampled nondecreasing function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneCurve {
    xs: Vec<f64>,
    ys: Vec<f64>,
    plateaus: Vec<Plateau>,
    continuity: Continuity,
}

impl MonotoneCurve {
    /// Build a continuous curve from samples; abscissae must be strictly
    /// increasing, values nondecreasing. Plateaus are detected from runs of
    /// exactly equal values.
    pub fn continuous(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        Self::build(xs, ys, Continuity::Continuous)
    }

    /// Build a curve that may carry jumps (equal adjacent abscissae with
    /// increasing values), taking the `continuity` one-sided limit at jumps.
    pub fn with_jumps(xs: Vec<f64>, ys: Vec<f64>, continuity: Continuity) -> Result<Self> {
        Self::build(xs, ys, continuity)
    }

    fn build(xs: Vec<f64>, ys: Vec<f64>, continuity: Continuity) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(Error::validation("curve needs >= 2 samples of equal length"));
        }
        for w in xs.windows(2) {
            let ok = if continuity == Continuity::Continuous {
                w[1] > w[0]
            } else {
                w[1] >= w[0]
            };
            if !ok {
                return Err(Error::validation(format!(
                    "abscissae not monotone: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        for w in ys.windows(2) {
            if w[1] < w[0] {
                return Err(Error::validation(format!(
                    "values not nondecreasing: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if !xs.iter().chain(ys.iter()).all(|v| v.is_finite()) {
            return Err(Error::validation("curve samples must be finite"));
        }
        let plateaus = detect_plateaus(&xs, &ys);
        Ok(MonotoneCurve {
            xs,
            ys,
            plateaus,
            continuity,
        })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn plateaus(&self) -> &[Plateau] {
        &self.plateaus
    }

    pub fn continuity(&self) -> Continuity {
        self.continuity
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().unwrap())
    }

    pub fn range(&self) -> (f64, f64) {
        (self.ys[0], *self.ys.last().unwrap())
    }

    /// Evaluate at `x` (clamping to the domain endpoints). At a jump the
    /// stored continuity side decides the value.
    pub fn eval(&self, x: f64) -> f64 {
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= *self.xs.last().unwrap() {
            return *self.ys.last().unwrap();
        }
        // first index with xs[i] > x
        let hi = self.xs.partition_point(|&v| v <= x);
        let lo = hi - 1;
        if self.xs[lo] == x {
            // possibly inside a run of equal abscissae (a jump)
            return match self.continuity {
                Continuity::RightContinuous | Continuity::Continuous => self.ys[lo],
                Continuity::LeftContinuous => {
                    let first = self.xs.partition_point(|&v| v < x);
                    self.ys[first]
                }
            };
        }
        let t = (x - self.xs[lo]) / (self.xs[hi] - self.xs[lo]);
        self.ys[lo] + t * (self.ys[hi] - self.ys[lo])
    }

    /// Left limit at `x`: the value approached from below (differs from
    /// `eval` only at jumps of right-continuous curves).
    pub fn eval_left(&self, x: f64) -> f64 {
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x > *self.xs.last().unwrap() {
            return *self.ys.last().unwrap();
        }
        let first = self.xs.partition_point(|&v| v < x);
        if first < self.xs.len() && self.xs[first] == x {
            return self.ys[first];
        }
        self.eval(x)
    }

    /// Right-continuous generalized inverse evaluated at `y`:
    /// `inf { x | f(x) > y }`. Plateau values map to the plateau's right
    /// endpoint, jumps invert to linear segments.
    pub fn inverse_eval_right(&self, y: f64) -> f64 {
        if y >= *self.ys.last().unwrap() {
            return *self.xs.last().unwrap();
        }
        if y < self.ys[0] {
            return self.xs[0];
        }
        let hi = self.ys.partition_point(|&v| v <= y); // first ys > y
        let lo = hi - 1;
        if self.ys[lo] == y {
            return self.xs[lo]; // last sample of an equal-value run
        }
        let t = (y - self.ys[lo]) / (self.ys[hi] - self.ys[lo]);
        self.xs[lo] + t * (self.xs[hi] - self.xs[lo])
    }

    /// Left-continuous generalized inverse evaluated at `y`:
    /// `inf { x | f(x) >= y }`. Plateau values map to the plateau's left
    /// endpoint.
    pub fn inverse_eval_left(&self, y: f64) -> f64 {
        if y <= self.ys[0] {
            return self.xs[0];
        }
        if y > *self.ys.last().unwrap() {
            return *self.xs.last().unwrap();
        }
        let first = self.ys.partition_point(|&v| v < y); // first ys >= y
        if self.ys[first] == y {
            return self.xs[first];
        }
        let (lo, hi) = (first - 1, first);
        let t = (y - self.ys[lo]) / (self.ys[hi] - self.ys[lo]);
        self.xs[lo] + t * (self.xs[hi] - self.xs[lo])
    }

    /// Materialize the right-continuous generalized inverse as a curve.
    ///
    /// Plateaus become jumps and jumps become plateaus; breakpoints are
    /// preserved exactly, so inverting twice returns the original samples at
    /// continuity points.
    pub fn right_inverse(&self) -> MonotoneCurve {
        let mut xs = Vec::with_capacity(self.ys.len());
        let mut ys = Vec::with_capacity(self.ys.len());
        for i in 0..self.ys.len() {
            let (x, y) = (self.ys[i], self.xs[i]);
            // collapse interior samples of an equal-value run: keep first and last
            let run_interior = i > 0
                && i + 1 < self.ys.len()
                && self.ys[i - 1] == self.ys[i]
                && self.ys[i + 1] == self.ys[i];
            if run_interior {
                continue;
            }
            if xs.last() == Some(&x) && ys.last() == Some(&y) {
                continue;
            }
            xs.push(x);
            ys.push(y);
        }
        let has_jumps = xs.windows(2).any(|w| w[0] == w[1]);
        let continuity = if has_jumps {
            Continuity::RightContinuous
        } else {
            Continuity::Continuous
        };
        let plateaus = detect_plateaus(&xs, &ys);
        MonotoneCurve {
            xs,
            ys,
            plateaus,
            continuity,
        }
    }

    /// Append a sample, keeping monotonicity.
    pub fn append(&mut self, x: f64, y: f64) -> Result<()> {
        let (lx, ly) = (*self.xs.last().unwrap(), *self.ys.last().unwrap());
        let x_ok = if self.continuity == Continuity::Continuous {
            x > lx
        } else {
            x >= lx
        };
        if !x_ok || y < ly {
            return Err(Error::validation(format!(
                "append would break monotonicity: ({lx}, {ly}) then ({x}, {y})"
            )));
        }
        if y == ly {
            // extend or open a plateau
            match self.plateaus.last_mut() {
                Some(p) if p.value == y && p.end == lx => p.end = x,
                _ => self.plateaus.push(Plateau {
                    start: lx,
                    end: x,
                    value: y,
                }),
            }
        }
        self.xs.push(x);
        self.ys.push(y);
        Ok(())
    }

    /// Drop all samples with abscissa strictly greater than `x`.
    pub fn truncate_after(&mut self, x: f64) {
        let keep = self.xs.partition_point(|&v| v <= x);
        self.xs.truncate(keep.max(2));
        self.ys.truncate(keep.max(2));
        self.plateaus = detect_plateaus(&self.xs, &self.ys);
    }

    /// Smallest and largest difference quotient between consecutive samples
    /// with distinct abscissae.
    pub fn slope_bounds(&self) -> (f64, f64) {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for i in 1..self.xs.len() {
            let dx = self.xs[i] - self.xs[i - 1];
            if dx > 0.0 {
                let w = (self.ys[i] - self.ys[i - 1]) / dx;
                min = min.min(w);
                max = max.max(w);
            }
        }
        (min, max)
    }
}

fn detect_plateaus(xs: &[f64], ys: &[f64]) -> Vec<Plateau> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + 1 < ys.len() {
        if ys[i + 1] == ys[i] && xs[i + 1] > xs[i] {
            let start = xs[i];
            let value = ys[i];
            let mut j = i + 1;
            while j + 1 < ys.len() && ys[j + 1] == value {
                j += 1;
            }
            out.push(Plateau {
                start,
                end: xs[j],
                value,
            });
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linear_psi() -> MonotoneCurve {
        // Psi(sigma) = sigma / 2 on [0, 10]
        let xs: Vec<f64> = (0..=100).map(|i| 0.1 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&s| s / 2.0).collect();
        MonotoneCurve::continuous(xs, ys).unwrap()
    }

    #[test]
    fn linear_inverse() {
        let psi = linear_psi();
        let phi = psi.right_inverse();
        assert_eq!(phi.eval(2.0), 4.0);
        assert_eq!(psi.inverse_eval_right(2.0), 4.0);
    }

    #[test]
    fn plateau_becomes_jump() {
        // Psi with plateau value 3 on [4, 6]
        let xs = vec![0.0, 4.0, 6.0, 8.0];
        let ys = vec![0.0, 3.0, 3.0, 5.0];
        let psi = MonotoneCurve::continuous(xs, ys).unwrap();
        assert_eq!(psi.plateaus().len(), 1);
        assert_eq!(psi.eval(5.0), 3.0); // exact on the plateau

        let phi = psi.right_inverse();
        // right-continuity at the jump: Phi(3-) = 4, Phi(3) = 6
        assert_eq!(phi.eval_left(3.0), 4.0);
        assert_eq!(phi.eval(3.0), 6.0);
        assert_eq!(psi.inverse_eval_right(3.0), 6.0);
        assert_eq!(psi.inverse_eval_left(3.0), 4.0);

        // inverting back restores the plateau exactly
        let back = phi.right_inverse();
        assert_eq!(back.eval(5.0), 3.0);
        assert_eq!(back.plateaus().len(), 1);
    }

    #[test]
    fn jump_curve_eval_sides() {
        // Phi jumps from 1 to 4 at t = 2
        let phi = MonotoneCurve::with_jumps(
            vec![0.0, 2.0, 2.0, 3.0],
            vec![0.0, 1.0, 4.0, 5.0],
            Continuity::RightContinuous,
        )
        .unwrap();
        assert_eq!(phi.eval(2.0), 4.0);
        assert_eq!(phi.eval_left(2.0), 1.0);
        let psi = phi.right_inverse();
        assert_eq!(psi.eval(2.0), 2.0); // inside the induced plateau
        assert_eq!(psi.eval(1.0), 2.0);
        assert_eq!(psi.eval(4.0), 2.0);
    }

    #[test]
    fn validation_rejects_nonmonotone() {
        assert!(MonotoneCurve::continuous(vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
        assert!(MonotoneCurve::continuous(vec![0.0, 0.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn append_tracks_plateaus() {
        let mut c = MonotoneCurve::continuous(vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        c.append(2.0, 1.0).unwrap();
        c.append(3.0, 1.0).unwrap();
        c.append(4.0, 2.0).unwrap();
        assert_eq!(c.plateaus().len(), 1);
        assert_eq!(c.plateaus()[0].start, 1.0);
        assert_eq!(c.plateaus()[0].end, 3.0);
        assert!(c.append(3.5, 0.0).is_err());
    }

    proptest! {
        /// Round trip Phi(Psi(sigma)) = sigma at continuity points of random
        /// piecewise-linear nondecreasing curves.
        #[test]
        fn inverse_round_trip(incs in prop::collection::vec(0.0f64..1.0, 3..40)) {
            let mut xs = vec![0.0];
            let mut ys = vec![0.0];
            for (i, inc) in incs.iter().enumerate() {
                xs.push((i + 1) as f64 * 0.5);
                // quantize so that exact zeros (plateaus) occur often
                let q = (inc * 4.0).floor() / 4.0;
                ys.push(ys.last().unwrap() + q);
            }
            let psi = MonotoneCurve::continuous(xs.clone(), ys.clone()).unwrap();
            let phi = psi.right_inverse();
            // at strictly increasing samples, Phi(Psi(x)) == x exactly
            for i in 0..xs.len() {
                let interior = (i == 0 || ys[i] > ys[i-1]) && (i + 1 == ys.len() || ys[i+1] > ys[i]);
                if interior {
                    prop_assert!((phi.eval(psi.eval(xs[i])) - xs[i]).abs() < 1e-12);
                }
            }
            // double inversion restores the samples
            let back = phi.right_inverse();
            for i in 0..xs.len() {
                prop_assert!((back.eval(xs[i]) - ys[i]).abs() < 1e-12);
            }
        }

        /// The generalized-inverse composition laws hold on random curves.
        #[test]
        fn generalized_inverse_laws(incs in prop::collection::vec(0.0f64..1.0, 3..40), q in 0.0f64..1.0) {
            let mut xs = vec![0.0];
            let mut ys = vec![0.0];
            for (i, inc) in incs.iter().enumerate() {
                xs.push((i + 1) as f64 * 0.5);
                ys.push(ys.last().unwrap() + (inc * 4.0).floor() / 4.0);
            }
            let f = MonotoneCurve::continuous(xs.clone(), ys.clone()).unwrap();
            let (ylo, yhi) = f.range();
            let y = ylo + q * (yhi - ylo);
            let xr = f.inverse_eval_right(y);
            let xl = f.inverse_eval_left(y);
            prop_assert!(xl <= xr + 1e-12);
            // f(inverse_right(y)) >= y and f(inverse_left(y)) <= y (continuous f)
            prop_assert!(f.eval(xr) >= y - 1e-9);
            prop_assert!(f.eval(xl) <= y + 1e-9);
        }
    }
}
