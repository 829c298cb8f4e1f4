//! Held-out bounds, posterior diagnostics against the analytic mixture
//! posterior, and a finite-difference gradient checker.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iwsvgd::Estimate;
use crate::models::{Decoder, GmmPosterior, LogDensity};
use crate::numcore::{dot, log_sum_exp, mean, mean_and_se, Mat};
use crate::recognition::RecognitionNet;

/// How `log p(x, z)` is formed from decoder particles `θ_1..θ_M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum JointReading {
    /// `(1/M) Σ_j log p(x | z, θ_j) + log p(z)`, a lower bound by Jensen.
    #[default]
    MeanLog,
    /// `log (1/M) Σ_j p(x | z, θ_j) + log p(z)`.
    LogMeanExp,
}

impl JointReading {
    pub fn as_str(&self) -> &'static str {
        match self {
            JointReading::MeanLog => "mean-log",
            JointReading::LogMeanExp => "log-mean-exp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean-log" => Some(JointReading::MeanLog),
            "log-mean-exp" => Some(JointReading::LogMeanExp),
            _ => None,
        }
    }
}

pub fn log_joint(
    x: &[f64],
    z: &[f64],
    thetas: &[Vec<f64>],
    decoder: &dyn Decoder,
    latent_prior: &dyn LogDensity,
    reading: JointReading,
) -> Result<f64> {
    if thetas.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let ll: Vec<f64> = thetas
        .iter()
        .map(|t| decoder.log_likelihood(t, x, z))
        .collect::<Result<_>>()?;
    let lik = match reading {
        JointReading::MeanLog => mean(&ll),
        JointReading::LogMeanExp => log_sum_exp(&ll)? - (ll.len() as f64).ln(),
    };
    Ok(lik + latent_prior.log_density(z))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub elbo: f64,
    pub elbo_se: f64,
    pub s_elbo: f64,
    pub s_elbo_se: f64,
    /// `log p(x, z_s) - log q(z_s)` for every draw.
    pub log_weights: Vec<f64>,
    /// `-mean log q(z_s)`.
    pub entropy: f64,
    pub samples: usize,
    /// Draws per importance-weighted estimate.
    pub k: usize,
}

/// Per-draw log importance weights and code log densities.
pub fn log_weights(
    x: &[f64],
    thetas: &[Vec<f64>],
    decoder: &dyn Decoder,
    latent_prior: &dyn LogDensity,
    rec: &RecognitionNet,
    noise: &[Vec<f64>],
    reading: JointReading,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let pairs: Vec<(f64, f64)> = noise
        .par_iter()
        .map(|xi| {
            let (z, lq) = rec.draw_with_density(x, xi)?;
            Ok((log_joint(x, &z, thetas, decoder, latent_prior, reading)? - lq, lq))
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

/// ELBO and the `k`-sample bound from the same draws: the draws are split
/// into consecutive chunks of `k`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_report(
    x: &[f64],
    thetas: &[Vec<f64>],
    decoder: &dyn Decoder,
    latent_prior: &dyn LogDensity,
    rec: &RecognitionNet,
    noise: &[Vec<f64>],
    k: usize,
    reading: JointReading,
) -> Result<ElboReport> {
    if noise.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let (lw, lq) = log_weights(x, thetas, decoder, latent_prior, rec, noise, reading)?;
    let (elbo, elbo_se) = mean_and_se(&lw);
    let s = s_elbo_from_log_weights(&lw, k)?;
    Ok(ElboReport {
        elbo,
        elbo_se,
        s_elbo: s.value,
        s_elbo_se: s.std_error,
        entropy: -mean(&lq),
        samples: lw.len(),
        k,
        log_weights: lw,
    })
}

/// `log (1/k) Σ_i exp(w_i)` over consecutive chunks of `k` log weights.
pub fn s_elbo_from_log_weights(log_weights: &[f64], k: usize) -> Result<Estimate> {
    if k == 0 || log_weights.len() < k {
        return Err(Error::InvalidArgument(format!(
            "need at least k = {k} draws, got {}",
            log_weights.len()
        )));
    }
    let lk = (k as f64).ln();
    let per: Vec<f64> = log_weights
        .chunks_exact(k)
        .map(|c| Ok(log_sum_exp(c)? - lk))
        .collect::<Result<_>>()?;
    let (value, std_error) = mean_and_se(&per);
    Ok(Estimate { value, std_error })
}

pub fn elbo(
    x: &[f64],
    thetas: &[Vec<f64>],
    decoder: &dyn Decoder,
    latent_prior: &dyn LogDensity,
    rec: &RecognitionNet,
    noise: &[Vec<f64>],
    reading: JointReading,
) -> Result<Estimate> {
    let (lw, _) = log_weights(x, thetas, decoder, latent_prior, rec, noise, reading)?;
    if lw.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let (value, std_error) = mean_and_se(&lw);
    Ok(Estimate { value, std_error })
}

#[allow(clippy::too_many_arguments)]
pub fn s_elbo(
    x: &[f64],
    thetas: &[Vec<f64>],
    decoder: &dyn Decoder,
    latent_prior: &dyn LogDensity,
    rec: &RecognitionNet,
    noise: &[Vec<f64>],
    k: usize,
    reading: JointReading,
) -> Result<Estimate> {
    let (lw, _) = log_weights(x, thetas, decoder, latent_prior, rec, noise, reading)?;
    s_elbo_from_log_weights(&lw, k)
}

/// How samples are attributed to the two analytic modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ModeRule {
    /// Maximum-likelihood mixture weight with both analytic components held
    /// fixed; per-mode moments use the resulting responsibilities.
    #[default]
    MaxLikelihood,
    /// Hard assignment to the closer mean in the posterior's Mahalanobis
    /// metric.
    Nearest,
}

impl ModeRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModeRule::MaxLikelihood => "ml",
            ModeRule::Nearest => "nearest",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ml" => Some(ModeRule::MaxLikelihood),
            "nearest" => Some(ModeRule::Nearest),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDiag {
    /// Estimated weight of the first mode.
    pub mode_weight: f64,
    /// Euclidean error of each mode's sample mean; `None` when the mode
    /// received less than one sample's worth of mass.
    pub mean_errors: [Option<f64>; 2],
    /// Frobenius error of each mode's sample covariance.
    pub cov_errors: [Option<f64>; 2],
    /// Total responsibility (sample count under `Nearest`) per mode.
    pub mode_mass: [f64; 2],
    pub samples: usize,
}

fn ml_weight(log_ratio: &[f64]) -> f64 {
    // derivative of Σ log(p a + (1-p) b), decreasing in p
    let deriv = |p: f64| -> f64 {
        log_ratio
            .iter()
            .map(|&r| {
                if r > 0.0 {
                    let e = (-r).exp();
                    (1.0 - e) / (p + (1.0 - p) * e)
                } else {
                    let e = r.exp();
                    (e - 1.0) / (p * e + 1.0 - p)
                }
            })
            .sum()
    };
    if deriv(0.0) <= 0.0 {
        return 0.0;
    }
    if deriv(1.0) >= 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if deriv(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn weighted_moments(samples: &[Vec<f64>], w: &[f64], centre: &[f64]) -> (Vec<f64>, Mat) {
    let d = centre.len();
    let total: f64 = w.iter().sum();
    let mut shift = vec![0.0; d];
    for (s, wi) in samples.iter().zip(w) {
        for i in 0..d {
            shift[i] += wi * (s[i] - centre[i]);
        }
    }
    shift.iter_mut().for_each(|v| *v /= total);
    let mean: Vec<f64> = centre.iter().zip(&shift).map(|(c, s)| c + s).collect();
    let mut cov = Mat::zeros(d, d);
    for (s, wi) in samples.iter().zip(w) {
        let dev: Vec<f64> = s.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..d {
            for j in 0..d {
                cov.set(i, j, cov.get(i, j) + wi * dev[i] * dev[j]);
            }
        }
    }
    (mean, cov.scale(1.0 / total))
}

/// Compares code samples with the analytic two-mode posterior.
pub fn posterior_diagnostics(samples: &[Vec<f64>], post: &GmmPosterior, rule: ModeRule) -> Result<PosteriorDiag> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("posterior diagnostics need at least two samples".into()));
    }
    let dim = post.mean1.len();
    for s in samples {
        crate::error::ensure_len("posterior sample", dim, s.len())?;
    }
    let log_ratio: Vec<f64> = samples
        .iter()
        .map(|z| post.component_log_density(0, z) - post.component_log_density(1, z))
        .collect();
    let (weight, resp): (f64, Vec<f64>) = match rule {
        ModeRule::MaxLikelihood => {
            let p = ml_weight(&log_ratio);
            let resp = log_ratio
                .iter()
                .map(|&r| {
                    if p == 1.0 {
                        1.0
                    } else if p == 0.0 {
                        0.0
                    } else {
                        crate::numcore::sigmoid(r + p.ln() - (1.0 - p).ln())
                    }
                })
                .collect();
            (p, resp)
        }
        ModeRule::Nearest => {
            let maha = |z: &[f64], mu: &[f64]| -> f64 {
                let d: Vec<f64> = z.iter().zip(mu).map(|(a, b)| a - b).collect();
                dot(&d, &post.precision.matvec(&d).expect("dims"))
            };
            let resp: Vec<f64> = samples
                .iter()
                .map(|z| if maha(z, &post.mean1) <= maha(z, &post.mean2) { 1.0 } else { 0.0 })
                .collect();
            (mean(&resp), resp)
        }
    };
    let mut mean_errors = [None, None];
    let mut cov_errors = [None, None];
    let mut mode_mass = [0.0; 2];
    for (m, mu) in post.means().into_iter().enumerate() {
        let w: Vec<f64> = resp.iter().map(|r| if m == 0 { *r } else { 1.0 - r }).collect();
        let mass: f64 = w.iter().sum();
        mode_mass[m] = mass;
        if mass >= 1.0 {
            let (mean, cov) = weighted_moments(samples, &w, mu);
            let err: f64 = mean.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            mean_errors[m] = Some(err);
            cov_errors[m] = Some(cov.frobenius_distance(&post.covariance));
        }
    }
    Ok(PosteriorDiag {
        mode_weight: weight,
        mean_errors,
        cov_errors,
        mode_mass,
        samples: samples.len(),
    })
}

/// Largest relative error `|a - b| / max(|a|, |b|, 1e-8)` between `grad`
/// and central differences of `f` with step `eps`.
pub fn grad_check<F, G>(f: F, grad: G, point: &[f64], eps: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let g = grad(point);
    let mut worst: f64 = 0.0;
    let mut p = point.to_vec();
    for i in 0..point.len() {
        p[i] = point[i] + eps;
        let up = f(&p);
        p[i] = point[i] - eps;
        let down = f(&p);
        p[i] = point[i];
        let fd = (up - down) / (2.0 * eps);
        let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{gmm_analytic_posterior, CompletionReading, GaussianLinearDecoder, NormalPrior};
    use crate::numcore::RngStream;

    #[test]
    fn grad_check_examples() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[0] * x[1] - x[1] * x[1] * x[1];
        let g = |x: &[f64]| vec![2.0 * x[0] + 3.0 * x[1], 3.0 * x[0] - 3.0 * x[1] * x[1]];
        assert!(grad_check(f, g, &[0.7, -1.3], 1e-5) < 1e-9);
        let wrong = |x: &[f64]| g(x).into_iter().map(|v| 2.0 * v).collect();
        assert!((grad_check(f, wrong, &[0.7, -1.3], 1e-5) - 0.5).abs() < 1e-6);
    }

    fn sample_post() -> GmmPosterior {
        let theta = Mat::from_rows(&[vec![2.0, -1.0], vec![1.0, -2.0]]).unwrap();
        gmm_analytic_posterior(&[0.2, -0.1], &theta, 0.1, &[5.0, 5.0], &[-5.0, -5.0], CompletionReading::Completed).unwrap()
    }

    #[test]
    fn diagnostics_degenerate_cases() {
        let post = sample_post();
        let at_one = vec![post.mean1.clone(); 50];
        for rule in [ModeRule::MaxLikelihood, ModeRule::Nearest] {
            let d = posterior_diagnostics(&at_one, &post, rule).unwrap();
            assert_eq!(d.mode_weight, 1.0);
            assert_eq!(d.mean_errors[0], Some(0.0));
            assert_eq!(d.mean_errors[1], None);
        }
        assert!(posterior_diagnostics(&at_one[..1], &post, ModeRule::MaxLikelihood).is_err());
    }

    #[test]
    fn diagnostics_of_symmetric_samples() {
        let post = GmmPosterior {
            weight: 0.5,
            mean1: vec![1.0, 0.0],
            mean2: vec![-1.0, 0.0],
            precision: Mat::identity(2),
            covariance: Mat::identity(2),
        };
        let mut rng = RngStream::new(2, 0);
        let mut s = Vec::new();
        for _ in 0..200 {
            let z = rng.sample_gaussian(2);
            s.push(z.iter().map(|v| v * 1.5).collect::<Vec<f64>>());
            s.push(z.iter().map(|v| -v * 1.5).collect());
        }
        let d = posterior_diagnostics(&s, &post, ModeRule::MaxLikelihood).unwrap();
        assert!((d.mode_weight - 0.5).abs() < 1e-12);
        let n = posterior_diagnostics(&s, &post, ModeRule::Nearest).unwrap();
        assert!((n.mode_weight - 0.5).abs() < 1e-12);
        let mut rev = s.clone();
        rev.reverse();
        let r = posterior_diagnostics(&rev, &post, ModeRule::MaxLikelihood).unwrap();
        assert!((r.mode_weight - d.mode_weight).abs() < 1e-12);
    }

    #[test]
    fn exact_samples_recover_the_posterior() {
        let post = sample_post();
        let mut rng = RngStream::new(31, 0);
        let s: Vec<Vec<f64>> = (0..10_000).map(|_| post.sample(&mut rng)).collect();
        let d = posterior_diagnostics(&s, &post, ModeRule::MaxLikelihood).unwrap();
        let tr = post.covariance.get(0, 0) + post.covariance.get(1, 1);
        assert!((d.mode_weight - post.weight).abs() < 0.02, "{} vs {}", d.mode_weight, post.weight);
        for e in d.mean_errors.iter().flatten() {
            assert!(*e < 0.05 * tr.sqrt(), "{e}");
        }
    }

    #[test]
    fn elbo_of_identity_map_has_base_entropy() {
        let dec = GaussianLinearDecoder::new(1, 1, 1.0).unwrap();
        let rec = RecognitionNet::linear(&Mat::zeros(1, 1), &Mat::identity(1), vec![0.0]).unwrap();
        let mut rng = RngStream::new(3, 3);
        let noise: Vec<Vec<f64>> = (0..20_000).map(|_| rng.sample_gaussian(1)).collect();
        let r = elbo_report(&[0.5], &[vec![1.0]], &dec, &NormalPrior::standard(), &rec, &noise, 1, JointReading::MeanLog).unwrap();
        let h = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((r.entropy - h).abs() < 0.02);
        assert_eq!(r.s_elbo, r.elbo);
    }
}
