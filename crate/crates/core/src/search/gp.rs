//! Gaussian-process regression on one-hot encoded discrete points.
//!
//! Two one-hot points that differ in `m` coordinates are at squared
//! Euclidean distance `2m`, so the kernel only needs mismatch counts.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

const NOISE: f64 = 1e-4;
const LENGTHSCALES: [f64; 6] = [0.5, 1.0, 1.5, 2.0, 3.0, 5.0];

pub(crate) fn mismatches(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn kernel(m: usize, lengthscale: f64) -> f64 {
    (-(2.0 * m as f64) / (2.0 * lengthscale * lengthscale)).exp()
}

pub struct GaussianProcess {
    xs: Vec<Vec<usize>>,
    lengthscale: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    y_mean: f64,
    y_std: f64,
}

impl GaussianProcess {
    /// Standardises `y`, then picks the lengthscale maximising the log
    /// marginal likelihood over a small grid.
    pub fn fit(xs: &[Vec<usize>], ys: &[f64]) -> Self {
        let n = ys.len();
        assert!(n > 0 && xs.len() == n);
        let y_mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_std = if var > 1e-18 { var.sqrt() } else { 1.0 };
        let y = DVector::from_iterator(n, ys.iter().map(|v| (v - y_mean) / y_std));
        let mut best: Option<(f64, f64, Cholesky<f64, Dyn>, DVector<f64>)> = None;
        for &l in &LENGTHSCALES {
            let k = DMatrix::from_fn(n, n, |i, j| kernel(mismatches(&xs[i], &xs[j]), l) + if i == j { NOISE } else { 0.0 });
            let Some(chol) = Cholesky::new(k) else { continue };
            let alpha = chol.solve(&y);
            let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det;
            if best.as_ref().map_or(true, |b| lml > b.0) {
                best = Some((lml, l, chol, alpha));
            }
        }
        let (_, lengthscale, chol, alpha) = best.expect("noise term keeps the kernel positive definite");
        Self { xs: xs.to_vec(), lengthscale, chol, alpha, y_mean, y_std }
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    /// Posterior mean and standard deviation in the original units.
    pub fn predict(&self, x: &[usize]) -> (f64, f64) {
        let k = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| kernel(mismatches(xi, x), self.lengthscale)));
        let mean = k.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&k).expect("triangular factor is invertible");
        let var = (1.0 - v.dot(&v)).max(1e-12);
        (self.y_mean + mean * self.y_std, var.sqrt() * self.y_std)
    }
}

/// Expected improvement of a maximisation objective over `best`.
pub fn expected_improvement(mean: f64, std: f64, best: f64, xi: f64) -> f64 {
    let gain = mean - best - xi;
    if std <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / std;
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    (gain * n.cdf(z) + std * n.pdf(z)).max(0.0)
}
