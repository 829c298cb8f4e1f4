#![allow(dead_code)]

use steinflow::numcore::{log_sum_exp, Mat};

pub const GMM_THETA: [f64; 4] = [2.0, -1.0, 1.0, -2.0];
pub const GMM_SIGMA: f64 = 0.1;
pub const GMM_MU1: [f64; 2] = [5.0, 5.0];
pub const GMM_MU2: [f64; 2] = [-5.0, -5.0];

/// Posterior weight and per-component means by brute-force summation of the
/// joint over a square grid. Each component `N(z; μ_i, I)` of the prior is
/// integrated separately, in log space.
pub struct GridPosterior {
    pub weight: f64,
    pub mean1: [f64; 2],
    pub mean2: [f64; 2],
}

pub fn grid_posterior(x: &[f64], theta: &Mat, sigma: f64, n: usize, half_width: f64) -> GridPosterior {
    let step = 2.0 * half_width / (n - 1) as f64;
    let mut logs = [Vec::with_capacity(n * n), Vec::with_capacity(n * n)];
    let mut points = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let z = [-half_width + i as f64 * step, -half_width + j as f64 * step];
            let fx = theta.matvec(&z).unwrap();
            let lik: f64 = x.iter().zip(&fx).map(|(a, b)| -(a - b).powi(2) / (2.0 * sigma * sigma)).sum();
            for (m, mu) in [GMM_MU1, GMM_MU2].iter().enumerate() {
                let prior: f64 = z.iter().zip(mu).map(|(a, b)| -(a - b).powi(2) / 2.0).sum();
                logs[m].push(lik + prior);
            }
            points.push(z);
        }
    }
    let mass: Vec<f64> = logs.iter().map(|l| log_sum_exp(l).unwrap()).collect();
    let mut means = [[0.0; 2]; 2];
    for m in 0..2 {
        for (l, z) in logs[m].iter().zip(&points) {
            let w = (l - mass[m]).exp();
            means[m][0] += w * z[0];
            means[m][1] += w * z[1];
        }
    }
    GridPosterior {
        weight: 1.0 / (1.0 + (mass[1] - mass[0]).exp()),
        mean1: means[0],
        mean2: means[1],
    }
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
