//! RBF kernel `k(x, y) = exp(-‖x - y‖² / h)` and the median bandwidth rule.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::numcore::sq_dist;

/// How the median heuristic turns pairwise distances into `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BandwidthMode {
    /// `h` is the median squared distance, so a pair at the median has
    /// kernel value `e⁻¹`.
    #[default]
    Squared,
    /// `h` is the median (unsquared) distance.
    Unsquared,
}

impl BandwidthMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BandwidthMode::Squared => "squared",
            BandwidthMode::Unsquared => "unsquared",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "squared" => Some(BandwidthMode::Squared),
            "unsquared" => Some(BandwidthMode::Unsquared),
            _ => None,
        }
    }
}

pub const FALLBACK_BANDWIDTH: f64 = 1.0;

/// Median over all unordered pairs, lower median on even counts. Falls back
/// to `1.0` for fewer than two points or a zero median.
pub fn median_bandwidth(points: &[Vec<f64>], mode: BandwidthMode) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("median bandwidth of an empty point set".into()));
    }
    if points.len() < 2 {
        return Ok(FALLBACK_BANDWIDTH);
    }
    let n = points.len();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let s = sq_dist(&points[i], &points[j]);
            d.push(match mode {
                BandwidthMode::Squared => s,
                BandwidthMode::Unsquared => s.sqrt(),
            });
        }
    }
    let mid = (d.len() - 1) / 2;
    let (_, median, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let h = *median;
    if h > 0.0 && h.is_finite() {
        Ok(h)
    } else {
        Ok(FALLBACK_BANDWIDTH)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbfKernel {
    h: f64,
}

impl RbfKernel {
    pub fn new(h: f64) -> Result<Self> {
        if h > 0.0 && h.is_finite() {
            Ok(RbfKernel { h })
        } else {
            Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h}")))
        }
    }

    pub fn from_points(points: &[Vec<f64>], mode: BandwidthMode) -> Result<Self> {
        RbfKernel::new(median_bandwidth(points, mode)?)
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        ensure_len("RbfKernel::eval", x.len(), y.len())?;
        Ok(self.eval_unchecked(x, y))
    }

    /// `∇_x k(x, y) = -(2/h)(x - y) k(x, y)`.
    pub fn grad_first(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        ensure_len("RbfKernel::grad_first", x.len(), y.len())?;
        let k = self.eval_unchecked(x, y);
        let c = self.grad_coefficient(k);
        Ok(x.iter().zip(y).map(|(a, b)| c * (a - b)).collect())
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        (-sq_dist(x, y) / self.h).exp()
    }

    /// `∇_x k(x, y) = c (x - y)` with `c` from this.
    #[inline]
    pub(crate) fn grad_coefficient(&self, k: f64) -> f64 {
        -2.0 / self.h * k
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(median_bandwidth(&pts, BandwidthMode::Squared).unwrap(), 1.0);
        let same = vec![vec![2.0, 3.0], vec![2.0, 3.0]];
        assert_eq!(median_bandwidth(&same, BandwidthMode::Squared).unwrap(), 1.0);
        assert_eq!(median_bandwidth(&[vec![4.0]], BandwidthMode::Squared).unwrap(), 1.0);
        assert!(median_bandwidth(&[], BandwidthMode::Squared).is_err());
        let line = vec![vec![0.0], vec![1.0], vec![3.0], vec![6.0]];
        // squared distances: 1, 9, 36, 4, 25, 9 -> sorted 1,4,9,9,25,36 -> lower median 9
        assert_eq!(median_bandwidth(&line, BandwidthMode::Squared).unwrap(), 9.0);
        assert_eq!(median_bandwidth(&line, BandwidthMode::Unsquared).unwrap(), 3.0);
    }

    #[test]
    fn kernel_values() {
        let k1 = RbfKernel::new(1.0).unwrap();
        let k2 = RbfKernel::new(2.0).unwrap();
        assert_eq!(k1.eval(&[0.3, 0.1], &[0.3, 0.1]).unwrap(), 1.0);
        assert!((k1.eval(&[0.0, 0.0], &[1.0, 0.0]).unwrap() - 0.367_879_441_171_442_3).abs() < 1e-15);
        assert!((k2.eval(&[0.0, 0.0], &[1.0, 0.0]).unwrap() - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert!(k1.eval(&[0.0], &[1.0, 0.0]).is_err());
        assert!(RbfKernel::new(0.0).is_err());
    }

    #[test]
    fn kernel_gradient() {
        let k = RbfKernel::new(1.0).unwrap();
        assert_eq!(k.grad_first(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        let g = k.grad_first(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((g[0] + 0.735_758_882_342_884_6).abs() < 1e-15);
        assert_eq!(g[1], 0.0);
        assert!(k.grad_first(&[1.0], &[1.0, 2.0]).is_err());
    }
}
