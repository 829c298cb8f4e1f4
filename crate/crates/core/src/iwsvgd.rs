//! Importance-weighted Stein transport over `k` independent particle groups,
//! and Monte Carlo estimators for the multi-sample KL objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::kernels::RbfKernel;
use crate::numcore::{log_sum_exp, mean_and_se, sq_dist};
use crate::svgd::{check_scores, KernelPolicy};

/// Unnormalised log-weights `log ω_i` and their log-sum `log ω̃`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub log_weights: Vec<f64>,
    pub log_norm: f64,
}

impl WeightVector {
    pub fn from_log_weights(log_weights: Vec<f64>) -> Result<Self> {
        if log_weights.iter().any(|v| v.is_nan()) {
            return Err(Error::DegenerateWeights);
        }
        let log_norm = log_sum_exp(&log_weights)?;
        if !log_norm.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        Ok(WeightVector { log_weights, log_norm })
    }

    /// `log ω_i = log((1/M) Σ exp(r))` over the log-ratios `r` of group `i`.
    pub fn from_log_ratios(per_group: &[Vec<f64>], m: usize) -> Result<Self> {
        let shift = (m as f64).ln();
        let lw = per_group
            .iter()
            .map(|r| Ok(log_sum_exp(r)? - shift))
            .collect::<Result<Vec<f64>>>()?;
        WeightVector::from_log_weights(lw)
    }

    /// A single group with weight exactly one.
    pub fn unit() -> Self {
        WeightVector {
            log_weights: vec![0.0],
            log_norm: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    /// `ω_i / ω̃`; a single group gets exactly `1.0`.
    pub fn normalized(&self) -> Vec<f64> {
        if self.log_weights.len() == 1 {
            return vec![1.0];
        }
        self.log_weights.iter().map(|l| (l - self.log_norm).exp()).collect()
    }

    pub fn effective_sample_size(&self) -> f64 {
        let w = self.normalized();
        1.0 / w.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Gaussian KDE with the normalised RBF kernel of bandwidth `h`:
/// `log (1/M) Σ_j (πh)^{-d/2} exp(-‖θ - θ_j‖²/h)`.
pub fn kde_log_density(point: &[f64], particles: &[Vec<f64>], h: f64) -> Result<f64> {
    if particles.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let terms: Vec<f64> = particles
        .iter()
        .map(|p| {
            ensure_len("kde point", point.len(), p.len())?;
            Ok(-sq_dist(point, p) / h)
        })
        .collect::<Result<_>>()?;
    let d = point.len() as f64;
    Ok(log_sum_exp(&terms)? - (particles.len() as f64).ln() - 0.5 * d * (std::f64::consts::PI * h).ln())
}

/// Weighted cross-group Stein direction. `groups[i][j]` is particle `j` of
/// group `i`, `scores` has the same shape and `weights` are normalised.
/// The kernel for targets in group `i` takes its bandwidth from group `i`.
pub fn iw_stein_direction(
    groups: &[Vec<Vec<f64>>],
    scores: &[Vec<Vec<f64>>],
    weights: &[f64],
    policy: &KernelPolicy,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let k = groups.len();
    if k == 0 {
        return Err(Error::InvalidArgument("importance weighting needs at least one group".into()));
    }
    ensure_len("score groups", k, scores.len())?;
    ensure_len("weights", k, weights.len())?;
    let m = groups[0].len();
    if m == 0 {
        return Err(Error::InvalidArgument("transport needs at least one particle".into()));
    }
    let dim = groups[0][0].len();
    for (g, s) in groups.iter().zip(scores) {
        ensure_len("particles per group", m, g.len())?;
        ensure_len("scores per group", m, s.len())?;
        check_scores(s, dim)?;
    }
    let kernels: Vec<RbfKernel> = groups.iter().map(|g| policy.kernel_for(g)).collect::<Result<_>>()?;
    let mf = m as f64;
    let targets: Vec<(usize, usize)> = (0..k).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let flat: Vec<Vec<f64>> = targets
        .par_iter()
        .map(|&(i, j)| {
            let kernel = &kernels[i];
            let target = &groups[i][j];
            let mut acc = vec![0.0; dim];
            for jp in 0..m {
                for ip in 0..k {
                    let src = &groups[ip][jp];
                    let s = &scores[ip][jp];
                    let w = weights[ip];
                    let kv = kernel.eval_unchecked(src, target);
                    let c = kernel.grad_coefficient(kv);
                    if k == 1 {
                        for d in 0..dim {
                            acc[d] += kv * s[d] + c * (src[d] - target[d]);
                        }
                    } else {
                        for d in 0..dim {
                            acc[d] += w * (kv * s[d] + c * (src[d] - target[d]));
                        }
                    }
                }
            }
            acc.iter_mut().for_each(|v| *v /= mf);
            acc
        })
        .collect();
    let mut it = flat.into_iter();
    Ok((0..k).map(|_| it.by_ref().take(m).collect()).collect())
}

/// Direction for `k` groups of decoder-parameter particles.
pub fn iw_direction_theta(
    groups: &[Vec<Vec<f64>>],
    weights: &WeightVector,
    scores: &[Vec<Vec<f64>>],
    policy: &KernelPolicy,
) -> Result<Vec<Vec<Vec<f64>>>> {
    iw_stein_direction(groups, scores, &weights.normalized(), policy)
}

/// Direction for the code samples of one datum: `codes[i][j]` is `z^i_{jn}`
/// and `weights` are the per-datum `ω_in`.
pub fn iw_direction_z(
    codes: &[Vec<Vec<f64>>],
    weights: &WeightVector,
    scores: &[Vec<Vec<f64>>],
    policy: &KernelPolicy,
) -> Result<Vec<Vec<Vec<f64>>>> {
    iw_stein_direction(codes, scores, &weights.normalized(), policy)
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

fn group_count(samples: &[f64], dim: usize, k: usize) -> Result<usize> {
    if dim == 0 || k == 0 {
        return Err(Error::InvalidArgument("dimension and k must be at least 1".into()));
    }
    let per = dim * k;
    if samples.is_empty() || samples.len() % per != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} sample values do not form whole groups of {k} samples of dimension {dim}",
            samples.len()
        )));
    }
    Ok(samples.len() / per)
}

/// `-(1/G) Σ_g [log Σ_i exp(log p(Θ^{g,i}) - log q(Θ^{g,i})) - log k]`.
/// `samples` holds `G` consecutive groups of `k` points of dimension `dim`.
pub fn kl_k_estimate<P, Q>(samples: &[f64], dim: usize, k: usize, log_p: P, log_q: Q) -> Result<Estimate>
where
    P: Fn(&[f64]) -> f64 + Sync,
    Q: Fn(&[f64]) -> f64 + Sync,
{
    group_count(samples, dim, k)?;
    let lk = (k as f64).ln();
    let per_group: Vec<f64> = samples
        .par_chunks(dim * k)
        .map(|g| {
            let r: Vec<f64> = g.chunks(dim).map(|t| log_p(t) - log_q(t)).collect();
            -(log_sum_exp(&r).expect("k >= 1") - lk)
        })
        .collect();
    let (value, std_error) = mean_and_se(&per_group);
    Ok(Estimate { value, std_error })
}

/// Self-normalised weighted Stein estimate of the directional derivative of
/// the multi-sample KL along `ψ`:
/// `-E[(1/ω̃) Σ_i ω_i (score(Θ^i)·ψ(Θ^i) + div ψ(Θ^i))]`.
#[allow(clippy::too_many_arguments)]
pub fn iw_directional_derivative<P, Q, S, F, D>(
    samples: &[f64],
    dim: usize,
    k: usize,
    log_p: P,
    log_q: Q,
    score: S,
    psi: F,
    div_psi: D,
) -> Result<Estimate>
where
    P: Fn(&[f64]) -> f64 + Sync,
    Q: Fn(&[f64]) -> f64 + Sync,
    S: Fn(&[f64]) -> Vec<f64> + Sync,
    F: Fn(&[f64]) -> Vec<f64> + Sync,
    D: Fn(&[f64]) -> f64 + Sync,
{
    group_count(samples, dim, k)?;
    let per_group: Vec<f64> = samples
        .par_chunks(dim * k)
        .map(|g| {
            let pts: Vec<&[f64]> = g.chunks(dim).collect();
            let r: Vec<f64> = pts.iter().map(|t| log_p(t) - log_q(t)).collect();
            let w = WeightVector::from_log_weights(r).expect("finite log ratios").normalized();
            let a: f64 = pts
                .iter()
                .zip(&w)
                .map(|(t, wi)| {
                    let s = score(t);
                    let p = psi(t);
                    wi * (s.iter().zip(&p).map(|(x, y)| x * y).sum::<f64>() + div_psi(t))
                })
                .sum();
            -a
        })
        .collect();
    let (value, std_error) = mean_and_se(&per_group);
    Ok(Estimate { value, std_error })
}
