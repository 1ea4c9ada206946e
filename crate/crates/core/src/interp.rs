//! Shape-preserving piecewise cubic Hermite interpolation (PCHIP).
//!
//! Interior slopes are the Fritsch–Butland weighted harmonic mean of the
//! neighbouring secants, set to zero at local extrema, so every interval is
//! monotone and the curve never overshoots its samples.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    slopes: Vec<f64>,
}

impl Pchip {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::validation(
                "grid",
                format!("need ≥ 2 samples with matching values, got {n} and {}", y.len()),
            ));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::validation("grid", "samples must be finite"));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("grid", "abscissae must be strictly ascending"));
        }

        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = y
            .windows(2)
            .zip(&h)
            .map(|(w, &hk)| (w[1] - w[0]) / hk)
            .collect();

        let mut slopes = vec![0.0; n];
        if n == 2 {
            slopes[0] = delta[0];
            slopes[1] = delta[0];
        } else {
            for k in 1..n - 1 {
                let (s0, s1) = (delta[k - 1], delta[k]);
                if s0 == 0.0 || s1 == 0.0 || s0.signum() != s1.signum() {
                    continue;
                }
                let w1 = 2.0 * h[k] + h[k - 1];
                let w2 = h[k] + 2.0 * h[k - 1];
                slopes[k] = (w1 + w2) / (w1 / s0 + w2 / s1);
            }
            slopes[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            slopes[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Self { x, y, slopes })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Evaluates at `t`, clamping to the end samples outside the grid.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if t <= self.x[0] {
            return self.y[0];
        }
        if t >= self.x[n - 1] {
            return self.y[n - 1];
        }
        let k = self.x.partition_point(|&xi| xi <= t) - 1;
        let h = self.x[k + 1] - self.x[k];
        let s = (t - self.x[k]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.y[k] + h10 * h * self.slopes[k] + h01 * self.y[k + 1] + h11 * h * self.slopes[k + 1]
    }
}

/// One-sided three-point slope, limited to keep the end interval monotone.
fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() || d0 == 0.0 {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reproduces_samples() {
        let p = Pchip::new(vec![0.0, 1.0, 2.0, 4.0], vec![0.0, 0.5, 0.2, 1.0]).unwrap();
        for (x, y) in [(0.0, 0.0), (1.0, 0.5), (2.0, 0.2), (4.0, 1.0)] {
            assert!((p.eval(x) - y).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_data_is_exact() {
        let p = Pchip::new(vec![0.0, 1.0, 3.0, 4.0], vec![1.0, 3.0, 7.0, 9.0]).unwrap();
        for i in 0..=40 {
            let t = i as f64 * 0.1;
            assert!((p.eval(t) - (1.0 + 2.0 * t)).abs() < 1e-12);
        }
    }

    #[test]
    fn clamps_outside() {
        let p = Pchip::new(vec![-1.0, 0.0, 1.0], vec![0.3, 0.1, 0.3]).unwrap();
        assert_eq!(p.eval(-5.0), 0.3);
        assert_eq!(p.eval(7.0), 0.3);
    }

    #[test]
    fn rejects_non_ascending() {
        assert!(Pchip::new(vec![0.0, 0.0, 1.0], vec![0.0; 3]).is_err());
        assert!(Pchip::new(vec![0.0], vec![0.0]).is_err());
    }

    proptest! {
        #[test]
        fn stays_between_neighbours(ys in proptest::collection::vec(0.0f64..1.0, 3..20), s in 0.0f64..1.0) {
            let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64).collect();
            let p = Pchip::new(xs, ys.clone()).unwrap();
            for k in 0..ys.len() - 1 {
                let v = p.eval(k as f64 + s);
                let lo = ys[k].min(ys[k + 1]);
                let hi = ys[k].max(ys[k + 1]);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
