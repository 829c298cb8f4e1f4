//! Likelihood families with exact score functions, latent/parameter priors,
//! and the closed-form posterior of the two-component Gaussian-mixture toy.
//!
//! Decoder parameters are always handled as one flat vector so that they can
//! live in a [`crate::svgd::ParticleSet`].

use std::fmt::Debug;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{ensure_len, Error, Result};
use crate::nn::Mlp;
use crate::numcore::{dot, log_sum_exp, sigmoid, softplus, sq_dist, Mat, RngStream};

/// A log-density together with its gradient.
pub trait LogDensity: Send + Sync + Debug {
    fn log_density(&self, v: &[f64]) -> f64;
    fn score(&self, v: &[f64]) -> Vec<f64>;
}

/// `log p(x | z, θ)` and its gradients.
pub struct DecoderGrad {
    pub log_lik: f64,
    pub dz: Vec<f64>,
    pub dtheta: Vec<f64>,
}

pub trait Decoder: Send + Sync + Debug {
    fn data_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn param_dim(&self) -> usize;

    /// Rejects observations outside the likelihood's support.
    fn check_datum(&self, _x: &[f64]) -> Result<()> {
        Ok(())
    }

    fn log_likelihood(&self, theta: &[f64], x: &[f64], z: &[f64]) -> Result<f64>;

    /// `(log p, ∇_z log p)`.
    fn grad_latent(&self, theta: &[f64], x: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn grad_all(&self, theta: &[f64], x: &[f64], z: &[f64]) -> Result<DecoderGrad>;

    /// Draws an observation `x ~ p(x | z, θ)`.
    fn sample(&self, theta: &[f64], z: &[f64], rng: &mut RngStream) -> Result<Vec<f64>>;
}

/// Isotropic `N(0, scale² I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalPrior {
    pub scale: f64,
}

impl NormalPrior {
    pub fn standard() -> Self {
        NormalPrior { scale: 1.0 }
    }
}

impl LogDensity for NormalPrior {
    fn log_density(&self, v: &[f64]) -> f64 {
        let s2 = self.scale * self.scale;
        -0.5 * dot(v, v) / s2 - 0.5 * v.len() as f64 * (2.0 * std::f64::consts::PI * s2).ln()
    }

    fn score(&self, v: &[f64]) -> Vec<f64> {
        let s2 = self.scale * self.scale;
        v.iter().map(|x| -x / s2).collect()
    }
}

/// `½ N(μ1, I) + ½ N(μ2, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    pub mu1: Vec<f64>,
    pub mu2: Vec<f64>,
}

impl GmmPrior {
    fn component_logs(&self, z: &[f64]) -> [f64; 2] {
        [-0.5 * sq_dist(z, &self.mu1), -0.5 * sq_dist(z, &self.mu2)]
    }
}

impl LogDensity for GmmPrior {
    fn log_density(&self, z: &[f64]) -> f64 {
        let c = self.component_logs(z);
        log_sum_exp(&c).expect("two components") - 2f64.ln()
            - 0.5 * z.len() as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    fn score(&self, z: &[f64]) -> Vec<f64> {
        gmm_prior_score(z, &self.mu1, &self.mu2)
    }
}

/// `r₁(z)(μ1 - z) + r₂(z)(μ2 - z)` with responsibilities from the equal-weight
/// identity-covariance mixture.
pub fn gmm_prior_score(z: &[f64], mu1: &[f64], mu2: &[f64]) -> Vec<f64> {
    let l1 = -0.5 * sq_dist(z, mu1);
    let l2 = -0.5 * sq_dist(z, mu2);
    let lse = log_sum_exp(&[l1, l2]).expect("two components");
    let r1 = (l1 - lse).exp();
    let r2 = (l2 - lse).exp();
    z.iter()
        .enumerate()
        .map(|(i, zi)| r1 * (mu1[i] - zi) + r2 * (mu2[i] - zi))
        .collect()
}

/// Positive map for unconstrained coordinates: `softplus(u) + 1e-6`.
pub const RATE_FLOOR: f64 = 1e-6;

pub fn positive(u: f64) -> f64 {
    softplus(u) + RATE_FLOOR
}

/// Gamma(shape, rate) on `positive(u)`, expressed as a density over the
/// unconstrained `u` (log-Jacobian `log σ(u)` included).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaSoftplusPrior {
    pub shape: f64,
    pub rate: f64,
}

impl LogDensity for GammaSoftplusPrior {
    fn log_density(&self, u: &[f64]) -> f64 {
        let (a, b) = (self.shape, self.rate);
        u.iter()
            .map(|&ui| {
                let z = positive(ui);
                a * b.ln() - ln_gamma(a) + (a - 1.0) * z.ln() - b * z + log_sigmoid(ui)
            })
            .sum()
    }

    fn score(&self, u: &[f64]) -> Vec<f64> {
        let (a, b) = (self.shape, self.rate);
        u.iter()
            .map(|&ui| {
                let z = positive(ui);
                let s = sigmoid(ui);
                ((a - 1.0) / z - b) * s + (1.0 - s)
            })
            .collect()
    }
}

fn log_sigmoid(u: f64) -> f64 {
    -softplus(-u)
}

/// `x ~ N(θ z, σ² I)` with `θ` a `P × K` matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLinearDecoder {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub sigma: f64,
}

impl GaussianLinearDecoder {
    pub fn new(data_dim: usize, latent_dim: usize, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        Ok(GaussianLinearDecoder {
            data_dim,
            latent_dim,
            sigma,
        })
    }

    fn theta_mat(&self, theta: &[f64]) -> Result<Mat> {
        Mat::from_vec(self.data_dim, self.latent_dim, theta.to_vec())
    }
}

/// `(∇_z, ∇_θ)` of `log N(x; θz, σ²I)`: `θᵀ(x - θz)/σ²` and `(x - θz)zᵀ/σ²`.
pub fn gaussian_linear_scores(theta: &Mat, sigma: f64, x: &[f64], z: &[f64]) -> Result<(Vec<f64>, Mat)> {
    let pred = theta.matvec(z)?;
    ensure_len("gaussian_linear_scores x", theta.rows(), x.len())?;
    let s2 = sigma * sigma;
    let r: Vec<f64> = x.iter().zip(&pred).map(|(a, b)| (a - b) / s2).collect();
    let dz = theta.tr_matvec(&r)?;
    let mut dtheta = Mat::zeros(theta.rows(), theta.cols());
    for i in 0..theta.rows() {
        for j in 0..theta.cols() {
            dtheta.set(i, j, r[i] * z[j]);
        }
    }
    Ok((dz, dtheta))
}

impl Decoder for GaussianLinearDecoder {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn param_dim(&self) -> usize {
        self.data_dim * self.latent_dim
    }

    fn log_likelihood(&self, theta: &[f64], x: &[f64], z: &[f64]) -> Result<f64> {
        let pred = self.theta_mat(theta)?.matvec(z)?;
        ensure_len("GaussianLinearDecoder x", self.data_dim, x.len())?;
        let s2 = self.sigma * self.sigma;
        Ok(-0.5 * sq_dist(x, &pred) / s2
            - 0.5 * self.data_dim as f64 * (2.0 * std::f64::consts::PI * s2).ln())
    }

    fn grad_latent(&self, theta: &[f64], x: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let g = self.grad_all(theta, x, z)?;
        Ok((g.log_lik, g.dz))
    }

    fn grad_all(&self, theta: &[f64], x: &[f64], z: &[f64]) -> Result<DecoderGrad> {
        let t = self.theta_mat(theta)?;
        let (dz, dtheta) = gaussian_linear_scores(&t, self.sigma, x, z)?;
        Ok(DecoderGrad {
            log_lik: self.log_likelihood(theta, x, z)?,
            dz,
            dtheta: dtheta.into_vec(),
        })
    }

    fn sample(&self, theta: &[f64], z: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        let pred = self.theta_mat(theta)?.matvec(z)?;
        Ok(pred.iter().map(|m| m + self.sigma * rng.gaussian()).collect())
    }
}

/// Which algebraic reading of the mixture-posterior completion to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionReading {
    /// Standard completion of the square: `μ̂_i = Λ⁻¹(θᵀx/σ² + μ_i)` and
    /// `p̂ = 1 / (1 + exp((c₁ - c₂)/2))`.
    Completed,
    /// Formulas transcribed as printed: `μ̂_i = Λ⁻¹(θᵀx/σ² - μ_i)` and
    /// `p̂ = 1 / (1 + exp(c₂ - c₁))`. Kept for comparison against quadrature;
    /// it does not match the true posterior.
    AsPrinted,
}

/// `p̂ N(μ̂1, Σ) + (1 - p̂) N(μ̂2, Σ)` with `Σ = Λ⁻¹`, `Λ = θᵀθ/σ² + I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPosterior {
    pub weight: f64,
    pub mean1: Vec<f64>,
    pub mean2: Vec<f64>,
    pub precision: Mat,
    pub covariance: Mat,
}

impl GmmPosterior {
    pub fn means(&self) -> [&[f64]; 2] {
        [&self.mean1, &self.mean2]
    }

    /// Log density of component `i` (0 or 1) at `z`.
    pub fn component_log_density(&self, i: usize, z: &[f64]) -> f64 {
        let mu = self.means()[i];
        let d: Vec<f64> = z.iter().zip(mu).map(|(a, b)| a - b).collect();
        let quad = dot(&d, &self.precision.matvec(&d).expect("dims"));
        let (logdet_prec, _) = crate::numcore::lu_log_abs_det(&self.precision).expect("square");
        -0.5 * quad + 0.5 * logdet_prec - 0.5 * z.len() as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let a = self.weight.ln() + self.component_log_density(0, z);
        let b = (1.0 - self.weight).ln() + self.component_log_density(1, z);
        log_sum_exp(&[a, b]).expect("two components")
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let l = self.covariance.cholesky().expect("covariance is positive definite");
        let mu = if rng.uniform() < self.weight { &self.mean1 } else { &self.mean2 };
        let e = rng.sample_gaussian(mu.len());
        let off = l.matvec(&e).expect("dims");
        mu.iter().zip(off).map(|(a, b)| a + b).collect()
    }
}

pub fn gmm_analytic_posterior(
    x: &[f64],
    theta: &Mat,
    sigma: f64,
    mu1: &[f64],
    mu2: &[f64],
    reading: CompletionReading,
) -> Result<GmmPosterior> {
    let k = theta.cols();
    ensure_len("gmm posterior x", theta.rows(), x.len())?;
    ensure_len("gmm posterior mu1", k, mu1.len())?;
    ensure_len("gmm posterior mu2", k, mu2.len())?;
    let s2 = sigma * sigma;
    let precision = theta.transpose().matmul(theta)?.scale(1.0 / s2).add(&Mat::identity(k))?;
    let covariance = precision.inverse().map_err(|_| Error::Singular("gmm posterior precision"))?;
    let t: Vec<f64> = theta.tr_matvec(x)?.into_iter().map(|v| v / s2).collect();
    let sign = match reading {
        CompletionReading::Completed => 1.0,
        CompletionReading::AsPrinted => -1.0,
    };
    let mut means = Vec::with_capacity(2);
    let mut c = [0.0; 2];
    for (i, mu) in [mu1, mu2].into_iter().enumerate() {
        let b: Vec<f64> = t.iter().zip(mu).map(|(a, m)| a + sign * m).collect();
        let m_hat = covariance.matvec(&b)?;
        c[i] = dot(x, x) / s2 + dot(mu, mu) - dot(&m_hat, &precision.matvec(&m_hat)?);
        means.push(m_hat);
    }
    let weight = match reading {
        CompletionReading::Completed => sigmoid(0.5 * (c[1] - c[0])),
        CompletionReading::AsPrinted => sigmoid(c[0] - c[1]),
    };
    let mean2 = means.pop().expect("two means");
    let mean1 = means.pop().expect("two means");
    Ok(GmmPosterior {
        weight,
        mean1,
        mean2,
        precision,
        covariance,
    })
}

/// Bernoulli pixels with logits from a generator network `z → logits`.
/// The particle vector is the generator's flat parameter vector.
#[derive(Debug, Clone)]
pub struct BernoulliMlpDecoder {
    pub generator: Mlp,
}

pub const LOGIT_CLAMP: f64 = 30.0;

impl BernoulliMlpDecoder {
    pub fn new(generator: Mlp) -> Result<Self> {
        let last = generator.shapes().last().expect("non-empty");
        if last.activation != crate::nn::Activation::Identity {
            return Err(Error::InvalidArgument("generator must output raw logits".into()));
        }
        Ok(BernoulliMlpDecoder { generator })
    }
}

fn check_binary(x: &[f64]) -> Result<()> {
    for (index, &value) in x.iter().enumerate() {
        if value != 0.0 && value != 1.0 {
            return Err(Error::NonBinary { index, value });
        }
    }
    Ok(())
}

/// `(log p(x|z), ∇_z, ∇_params)` for the Bernoulli generator, back-propagating
/// the cotangent `x - σ(l)` through the network.
pub fn bernoulli_scores(
    dec: &BernoulliMlpDecoder,
    params: &[f64],
    x: &[f64],
    z: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (log_lik, cot, tape) = bernoulli_forward(dec, params, x, z)?;
    let (dparams, dz) = dec.generator.backward_with(params, &tape, &cot)?;
    Ok((log_lik, dz, dparams))
}

fn bernoulli_forward(
    dec: &BernoulliMlpDecoder,
    params: &[f64],
    x: &[f64],
    z: &[f64],
) -> Result<(f64, Vec<f64>, crate::nn::Tape)> {
    check_binary(x)?;
    let (logits, tape) = dec.generator.forward_with(params, z)?;
    ensure_len("Bernoulli x", logits.len(), x.len())?;
    let mut log_lik = 0.0;
    let mut cot = Vec::with_capacity(x.len());
    for (l, xi) in logits.iter().zip(x) {
        let lc = l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        log_lik += xi * lc - softplus(lc);
        cot.push(xi - sigmoid(lc));
    }
    Ok((log_lik, cot, tape))
}

impl Decoder for BernoulliMlpDecoder {
    fn data_dim(&self) -> usize {
        self.generator.output_dim()
    }

    fn latent_dim(&self) -> usize {
        self.generator.input_dim()
    }

    fn param_dim(&self) -> usize {
        self.generator.param_count()
    }

    fn check_datum(&self, x: &[f64]) -> Result<()> {
        check_binary(x)
    }

    fn log_likelihood(&self, theta: &[f64], x: &[f64], z: &[f64]) -> Result<f64> {
        Ok(bernoulli_forward(self, theta, x, z)?.0)
    }

    fn grad_latent(&self, theta: &[f64], x: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (log_lik, cot, tape) = bernoulli_forward(self, theta, x, z)?;
        Ok((log_lik, self.generator.input_grad_with(theta, &tape, &cot)?))
    }

    fn grad_all(&self, theta: &[f64], x: &[f64], z: &[f64]) -> Result<DecoderGrad> {
        let (log_lik, dz, dtheta) = bernoulli_scores(self, theta, x, z)?;
        Ok(DecoderGrad { log_lik, dz, dtheta })
    }

    fn sample(&self, theta: &[f64], z: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        let (logits, _) = self.generator.forward_with(theta, z)?;
        Ok(logits
            .iter()
            .map(|l| if rng.uniform() < sigmoid(*l) { 1.0 } else { 0.0 })
            .collect())
    }
}

/// `x ~ Pois(θ z)` with loadings `θ = positive(θ̃)` (`P × V`, row-major) and
/// scores `z = positive(z̃)`, both stored unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonFactorDecoder {
    pub data_dim: usize,
    pub factors: usize,
}

impl PoissonFactorDecoder {
    pub fn rates(&self, theta: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        ensure_len("Poisson loadings", self.data_dim * self.factors, theta.len())?;
        ensure_len("Poisson scores", self.factors, z.len())?;
        let zp: Vec<f64> = z.iter().map(|&u| positive(u)).collect();
        Ok((0..self.data_dim)
            .map(|p| {
                (0..self.factors)
                    .map(|v| positive(theta[p * self.factors + v]) * zp[v])
                    .sum()
            })
            .collect())
    }
}

fn check_counts(x: &[f64]) -> Result<()> {
    for (i, &v) in x.iter().enumerate() {
        if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "count at position {i} must be a nonnegative integer, got {v}"
            )));
        }
    }
    Ok(())
}

impl Decoder for PoissonFactorDecoder {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn latent_dim(&self) -> usize {
        self.factors
    }

    fn param_dim(&self) -> usize {
        self.data_dim * self.factors
    }

    fn check_datum(&self, x: &[f64]) -> Result<()> {
        check_counts(x)
    }

    fn log_likelihood(&self, theta: &[f64], x: &[f64], z: &[f64]) -> Result<f64> {
        check_counts(x)?;
        let rates = self.rates(theta, z)?;
        ensure_len("Poisson x", self.data_dim, x.len())?;
        let mut out = 0.0;
        for (i, (&xi, &r)) in x.iter().zip(&rates).enumerate() {
            if r <= 0.0 && xi > 0.0 {
                return Err(Error::ZeroRate { index: i });
            }
            out += xi * r.ln() - r - ln_gamma(xi + 1.0);
        }
        Ok(out)
    }

    fn grad_latent(&self, theta: &[f64], x: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let g = self.grad_all(theta, x, z)?;
        Ok((g.log_lik, g.dz))
    }

    fn grad_all(&self, theta: &[f64], x: &[f64], z: &[f64]) -> Result<DecoderGrad> {
        let log_lik = self.log_likelihood(theta, x, z)?;
        let rates = self.rates(theta, z)?;
        let v = self.factors;
        let zp: Vec<f64> = z.iter().map(|&u| positive(u)).collect();
        let mut dz = vec![0.0; v];
        let mut dtheta = vec![0.0; theta.len()];
        for p in 0..self.data_dim {
            let w = x[p] / rates[p] - 1.0;
            for f in 0..v {
                let t = theta[p * v + f];
                dz[f] += w * positive(t);
                dtheta[p * v + f] = w * zp[f] * sigmoid(t);
            }
        }
        for (d, &u) in dz.iter_mut().zip(z) {
            *d *= sigmoid(u);
        }
        Ok(DecoderGrad { log_lik, dz, dtheta })
    }

    fn sample(&self, theta: &[f64], z: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        Ok(self
            .rates(theta, z)?
            .into_iter()
            .map(|r| rng.poisson(r) as f64)
            .collect())
    }
}

/// Default shape of the relaxed (independent gamma) loading prior.
pub const DEFAULT_LOADING_SHAPE: f64 = 1.1;

/// Full unconstrained log-posterior gradient for Poisson factor analysis:
/// likelihood, both gamma priors and the softplus log-Jacobians.
pub fn poisson_scores(
    dec: &PoissonFactorDecoder,
    theta: &[f64],
    x: &[f64],
    z: &[f64],
    score_prior: &GammaSoftplusPrior,
    loading_prior: &GammaSoftplusPrior,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = dec.grad_all(theta, x, z)?;
    let dz = g.dz.iter().zip(score_prior.score(z)).map(|(a, b)| a + b).collect();
    let dt = g
        .dtheta
        .iter()
        .zip(loading_prior.score(theta))
        .map(|(a, b)| a + b)
        .collect();
    Ok((dz, dt))
}

/// `p(y | z, θ̃) = softmax(θ̃ z)[y]` with `θ̃` a `C × d_z` matrix (row-major).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftmaxLabelDecoder {
    pub classes: usize,
    pub latent_dim: usize,
}

impl SoftmaxLabelDecoder {
    pub fn param_dim(&self) -> usize {
        self.classes * self.latent_dim
    }

    pub fn probabilities(&self, theta: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        ensure_len("label decoder params", self.param_dim(), theta.len())?;
        ensure_len("label decoder z", self.latent_dim, z.len())?;
        let logits: Vec<f64> = theta.chunks(self.latent_dim).map(|row| dot(row, z)).collect();
        let lse = log_sum_exp(&logits)?;
        Ok(logits.iter().map(|l| (l - lse).exp()).collect())
    }

    /// `(log p(y|z), ∇_z, ∇_θ̃)`; labels are zero-based.
    pub fn scores(&self, theta: &[f64], y: usize, z: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        if y >= self.classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: self.classes,
            });
        }
        let p = self.probabilities(theta, z)?;
        let resid: Vec<f64> = (0..self.classes)
            .map(|c| if c == y { 1.0 } else { 0.0 } - p[c])
            .collect();
        let mut dz = vec![0.0; self.latent_dim];
        let mut dtheta = vec![0.0; self.param_dim()];
        for c in 0..self.classes {
            let row = &theta[c * self.latent_dim..(c + 1) * self.latent_dim];
            for d in 0..self.latent_dim {
                dz[d] += row[d] * resid[c];
                dtheta[c * self.latent_dim + d] = resid[c] * z[d];
            }
        }
        Ok((p[y].ln(), dz, dtheta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], eps: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                a[i] += eps;
                let mut b = x.to_vec();
                b[i] -= eps;
                (f(&a) - f(&b)) / (2.0 * eps)
            })
            .collect()
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gmm_prior_score_examples() {
        assert_eq!(gmm_prior_score(&[0.0, 0.0], &[2.0, 1.0], &[-2.0, -1.0]), vec![0.0, 0.0]);
        let s = gmm_prior_score(&[1.0], &[1.0], &[-1.0]);
        assert!((s[0] + 0.238_405_844_044_234).abs() < 1e-12);
        let prior = GmmPrior {
            mu1: vec![5.0, 5.0],
            mu2: vec![-5.0, -5.0],
        };
        let mut rng = RngStream::new(1, 2);
        for _ in 0..20 {
            let z: Vec<f64> = rng.sample_gaussian(2).iter().map(|v| 3.0 * v).collect();
            let g = fd(|v| prior.log_density(v), &z, 1e-5);
            assert!(max_rel(&prior.score(&z), &g) < 1e-5);
        }
    }

    #[test]
    fn gaussian_linear_examples() {
        let t = Mat::from_vec(1, 1, vec![2.0]).unwrap();
        let (dz, dt) = gaussian_linear_scores(&t, 1.0, &[3.0], &[1.0]).unwrap();
        assert_eq!(dz, vec![2.0]);
        assert_eq!(dt.as_slice(), &[1.0]);
        let t = Mat::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let z = [0.3, -0.7];
        let x = t.matvec(&z).unwrap();
        let (dz, dt) = gaussian_linear_scores(&t, 0.4, &x, &z).unwrap();
        assert!(dz.iter().chain(dt.as_slice()).all(|v| *v == 0.0));
    }

    #[test]
    fn posterior_reduces_to_prior_without_information() {
        let theta = Mat::zeros(2, 2);
        let p = gmm_analytic_posterior(&[0.3, 1.0], &theta, 0.1, &[5.0, 5.0], &[-5.0, -5.0], CompletionReading::Completed)
            .unwrap();
        assert!((p.weight - 0.5).abs() < 1e-15);
        assert_eq!(p.mean1, vec![5.0, 5.0]);
        assert_eq!(p.mean2, vec![-5.0, -5.0]);
        assert_eq!(p.covariance, Mat::identity(2));
        let theta = Mat::from_rows(&[vec![2.0, -1.0], vec![1.0, -2.0]]).unwrap();
        let q = gmm_analytic_posterior(&[1.0, 2.0], &theta, 0.1, &[1.0, 1.0], &[1.0, 1.0], CompletionReading::Completed)
            .unwrap();
        assert!((q.weight - 0.5).abs() < 1e-15);
        assert_eq!(q.mean1, q.mean2);
    }

    #[test]
    fn bernoulli_scores_and_saturation() {
        let mut rng = RngStream::new(8, 0);
        let gen = Mlp::random(&[2, 6, 5], &[Activation::Tanh, Activation::Identity], &mut rng).unwrap();
        let dec = BernoulliMlpDecoder::new(gen.clone()).unwrap();
        let params = gen.params().to_vec();
        let x = [1.0, 0.0, 0.0, 1.0, 1.0];
        let z = [0.4, -0.3];
        let (_, dz, dp) = bernoulli_scores(&dec, &params, &x, &z).unwrap();
        let fz = fd(|v| dec.log_likelihood(&params, &x, v).unwrap(), &z, 1e-5);
        assert!(max_rel(&dz, &fz) < 1e-4);
        let fp = fd(|p| dec.log_likelihood(p, &x, &z).unwrap(), &params, 1e-5);
        assert!(max_rel(&dp, &fp) < 1e-4);
        assert!(matches!(
            bernoulli_scores(&dec, &params, &[0.5, 0.0, 0.0, 1.0, 1.0], &z),
            Err(Error::NonBinary { index: 0, .. })
        ));
        // zero logits: cotangent entries are ±½, visible through a linear generator
        let lin = Mlp::from_layers(vec![crate::nn::Layer::new(Mat::zeros(2, 1), vec![0.0; 2], Activation::Identity).unwrap()])
            .unwrap();
        let d = BernoulliMlpDecoder::new(lin.clone()).unwrap();
        let (_, _, dp) = bernoulli_scores(&d, lin.params(), &[1.0, 0.0], &[1.0]).unwrap();
        assert_eq!(dp, vec![0.5, -0.5, 0.5, -0.5]);
        // saturated logit with x = 1: gradient vanishes
        let big = Mlp::from_layers(vec![crate::nn::Layer::new(Mat::from_vec(1, 1, vec![1.0]).unwrap(), vec![0.0], Activation::Identity).unwrap()])
            .unwrap();
        let d = BernoulliMlpDecoder::new(big.clone()).unwrap();
        let (_, dz, _) = bernoulli_scores(&d, big.params(), &[1.0], &[1e3]).unwrap();
        assert!(dz[0].abs() < 1e-12);
    }

    #[test]
    fn poisson_scores_match_fd() {
        let dec = PoissonFactorDecoder { data_dim: 1, factors: 1 };
        let zp = GammaSoftplusPrior { shape: 2.0, rate: 1.0 };
        let tp = GammaSoftplusPrior {
            shape: DEFAULT_LOADING_SHAPE,
            rate: 1.0,
        };
        let theta = [0.7];
        let z = [-0.2];
        let x = [3.0];
        let (dz, dt) = poisson_scores(&dec, &theta, &x, &z, &zp, &tp).unwrap();
        let total = |t: &[f64], zz: &[f64]| dec.log_likelihood(t, &x, zz).unwrap() + zp.log_density(zz) + tp.log_density(t);
        assert!(max_rel(&dz, &fd(|v| total(&theta, v), &z, 1e-5)) < 1e-4);
        assert!(max_rel(&dt, &fd(|v| total(v, &z), &theta, 1e-5)) < 1e-4);
        // zero counts push all rates down
        let big = PoissonFactorDecoder { data_dim: 3, factors: 2 };
        let g = big.grad_all(&[0.1, 0.2, -0.3, 0.4, 0.0, 1.0], &[0.0; 3], &[0.5, -0.5]).unwrap();
        assert!(g.dz.iter().chain(&g.dtheta).all(|v| *v < 0.0));
        assert!(positive(-800.0) >= RATE_FLOOR);
        assert!(big.check_datum(&[1.0, 2.5, 0.0]).is_err());
    }

    #[test]
    fn poisson_change_of_variables() {
        // integral over the unconstrained coordinate vs the constrained one
        let dec = PoissonFactorDecoder { data_dim: 1, factors: 1 };
        let prior = GammaSoftplusPrior { shape: 2.0, rate: 1.0 };
        let theta = [0.3];
        let x = [2.0];
        let n = 400_000;
        let (lo, hi) = (-40.0, 40.0);
        let du = (hi - lo) / n as f64;
        let unconstrained: f64 = (0..n)
            .map(|i| {
                let u = lo + (i as f64 + 0.5) * du;
                (dec.log_likelihood(&theta, &x, &[u]).unwrap() + prior.log_density(&[u])).exp() * du
            })
            .sum();
        let loading = positive(theta[0]);
        let dz = 60.0 / n as f64;
        let constrained: f64 = (0..n)
            .map(|i| {
                let z = RATE_FLOOR + (i as f64 + 0.5) * dz;
                let lam = loading * z;
                let lik = x[0] * lam.ln() - lam - ln_gamma(x[0] + 1.0);
                let gam = 2.0 * 1f64.ln() - ln_gamma(2.0) + z.ln() - z;
                (lik + gam).exp() * dz
            })
            .sum();
        assert!((unconstrained - constrained).abs() < 1e-4, "{unconstrained} vs {constrained}");
    }

    #[test]
    fn softmax_label_scores() {
        let dec = SoftmaxLabelDecoder { classes: 2, latent_dim: 3 };
        let z = [0.5, -1.0, 2.0];
        let (lp, _, dt) = dec.scores(&[0.0; 6], 1, &z).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(&dt[..3], &[-0.25, 0.5, -1.0]);
        assert_eq!(&dt[3..], &[0.25, -0.5, 1.0]);
        let theta = [0.3, -0.2, 0.1, 1.0, 0.5, -0.4];
        let (_, dz, dt) = dec.scores(&theta, 0, &z).unwrap();
        let fz = fd(|v| dec.scores(&theta, 0, v).unwrap().0, &z, 1e-5);
        let ft = fd(|t| dec.scores(t, 0, &z).unwrap().0, &theta, 1e-5);
        assert!(max_rel(&dz, &fz) < 1e-5);
        assert!(max_rel(&dt, &ft) < 1e-5);
        let shifted: Vec<f64> = theta.iter().enumerate().map(|(i, v)| v + [0.7, -0.1, 0.3][i % 3]).collect();
        let (_, dz2, _) = dec.scores(&shifted, 0, &z).unwrap();
        for (a, b) in dz.iter().zip(&dz2) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(dec.scores(&theta, 2, &z), Err(Error::LabelOutOfRange { .. })));
    }
}
