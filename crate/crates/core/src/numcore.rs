//! Dense linear algebra, reproducible random streams and small numeric
//! helpers shared by every other module.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`; matrices are row-major [`Mat`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = mean(values);
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Shift-stabilised `log Σ exp(v_i)`. All entries `-inf` gives `-inf`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    let max = values
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or(Error::EmptyReduction)?;
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if max == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Log density of `N(0, I)` at `x`.
pub fn std_normal_log_density(x: &[f64]) -> f64 {
    -0.5 * dot(x, x) - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, linear above 30.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure_len("Mat::from_vec", rows * cols, data.len())?;
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            ensure_len("Mat::from_rows", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_len("Mat::matvec", self.cols, x.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ · y`
    pub fn tr_matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        ensure_len("Mat::tr_matvec", self.rows, y.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, yi) in y.iter().enumerate() {
            axpy(*yi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        ensure_len("Mat::matmul", self.cols, other.rows)?;
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                axpy(a, orow, dst);
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        ensure_len("Mat::add rows", self.rows, other.rows)?;
        ensure_len("Mat::add cols", self.cols, other.cols)?;
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn frobenius_distance(&self, other: &Mat) -> f64 {
        sq_dist(&self.data, &other.data).sqrt()
    }

    pub fn inverse(&self) -> Result<Mat> {
        let lu = Lu::factor(self)?;
        if lu.singular {
            return Err(Error::Singular("Mat::inverse"));
        }
        let n = self.rows;
        let mut inv = Mat::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = lu.solve(&e);
            for i in 0..n {
                inv.set(i, j, col[i]);
            }
        }
        Ok(inv)
    }

    /// Solves `self · x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        ensure_len("Mat::solve", self.rows, b.len())?;
        let lu = Lu::factor(self)?;
        if lu.singular {
            return Err(Error::Singular("Mat::solve"));
        }
        Ok(lu.solve(b))
    }

    /// Lower Cholesky factor of a symmetric positive-definite matrix.
    pub fn cholesky(&self) -> Result<Mat> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        let n = self.rows;
        let mut l = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::Singular("Mat::cholesky"));
                    }
                    l.set(i, i, s.sqrt());
                } else {
                    l.set(i, j, s / l.get(j, j));
                }
            }
        }
        Ok(l)
    }
}

/// LU factorisation with partial pivoting.
struct Lu {
    lu: Mat,
    perm: Vec<usize>,
    swaps: usize,
    singular: bool,
}

impl Lu {
    fn factor(m: &Mat) -> Result<Lu> {
        if !m.is_square() {
            return Err(Error::NotSquare {
                rows: m.rows,
                cols: m.cols,
            });
        }
        let n = m.rows;
        let mut lu = m.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut swaps = 0;
        let mut singular = false;
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, lu.get(i, k).abs()))
                .fold((k, -1.0), |best, c| if c.1 > best.1 { c } else { best });
            if pivot == 0.0 {
                singular = true;
                continue;
            }
            if p != k {
                for j in 0..n {
                    lu.data.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                swaps += 1;
            }
            let d = lu.get(k, k);
            for i in (k + 1)..n {
                let f = lu.get(i, k) / d;
                lu.set(i, k, f);
                for j in (k + 1)..n {
                    let v = lu.get(i, j) - f * lu.get(k, j);
                    lu.set(i, j, v);
                }
            }
        }
        Ok(Lu {
            lu,
            perm,
            swaps,
            singular,
        })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows;
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.lu.get(i, k) * y[k];
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                y[i] -= self.lu.get(i, k) * y[k];
            }
            y[i] /= self.lu.get(i, i);
        }
        y
    }
}

/// `(log|det m|, sign(det m))`. A singular matrix yields `(-inf, 0.0)`.
pub fn lu_log_abs_det(m: &Mat) -> Result<(f64, f64)> {
    let lu = Lu::factor(m)?;
    if lu.singular {
        return Ok((f64::NEG_INFINITY, 0.0));
    }
    let mut log_det = 0.0;
    let mut sign = if lu.swaps % 2 == 0 { 1.0 } else { -1.0 };
    for i in 0..m.rows {
        let d = lu.lu.get(i, i);
        if d < 0.0 {
            sign = -sign;
        }
        log_det += d.abs().ln();
    }
    Ok((log_det, sign))
}

/// Counter-based random stream keyed by `(seed, stream)`.
///
/// Two streams with the same key replay the same sequence; different stream
/// ids never overlap.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// `d` independent standard-normal draws.
    pub fn sample_gaussian(&mut self, d: usize) -> Vec<f64> {
        (0..d).map(|_| self.rng.sample(StandardNormal)).collect()
    }

    pub fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.random_range(0..=i);
            items.swap(i, j);
        }
    }

    /// Poisson draw; a zero or negative mean gives 0.
    pub fn poisson(&mut self, mean: f64) -> u64 {
        match Poisson::new(mean) {
            Ok(d) => self.rng.sample(d) as u64,
            Err(_) => 0,
        }
    }

    /// Gamma(shape, rate) draw.
    pub fn gamma(&mut self, shape: f64, rate: f64) -> f64 {
        let d = Gamma::new(shape, 1.0 / rate).expect("gamma shape and rate must be positive");
        self.rng.sample(d)
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One minimisation step of `params` along gradient `grad`.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut [f64], grad: &[f64]) -> Result<()> {
        ensure_len("AdamState::step params", self.m.len(), params.len())?;
        ensure_len("AdamState::step grad", self.m.len(), grad.len())?;
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cofactor_det(m: &[Vec<f64>]) -> f64 {
        let n = m.len();
        if n == 1 {
            return m[0][0];
        }
        (0..n)
            .map(|c| {
                let minor: Vec<Vec<f64>> = m[1..]
                    .iter()
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .filter(|(j, _)| *j != c)
                            .map(|(_, v)| *v)
                            .collect()
                    })
                    .collect();
                let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
                sign * m[0][c] * cofactor_det(&minor)
            })
            .sum()
    }

    #[test]
    fn gaussian_stream_is_reproducible() {
        let a = RngStream::new(11, 3).sample_gaussian(5);
        let b = RngStream::new(11, 3).sample_gaussian(5);
        let c = RngStream::new(11, 4).sample_gaussian(5);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(RngStream::new(1, 1).sample_gaussian(3).len(), 3);
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = RngStream::new(2024, 0);
        let xs = rng.sample_gaussian(100_000);
        let m = mean(&xs);
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
        assert!(m.abs() < 0.02, "mean {m}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn log_sum_exp_values() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]).unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
        // high-precision reference: ln(e^-1 + e^2 + e^0.5)
        assert!((log_sum_exp(&[-1.0, 2.0, 0.5]).unwrap() - 2.241_311_296_657_16).abs() < 1e-12);
        assert!(matches!(log_sum_exp(&[]), Err(Error::EmptyReduction)));
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn log_det_examples() {
        assert_eq!(lu_log_abs_det(&Mat::identity(3)).unwrap(), (0.0, 1.0));
        let d = Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let (ld, s) = lu_log_abs_det(&d).unwrap();
        assert!((ld - 4f64.ln()).abs() < 1e-15);
        assert_eq!(s, 1.0);
        let sing = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(lu_log_abs_det(&sing).unwrap(), (f64::NEG_INFINITY, 0.0));
        assert!(matches!(
            lu_log_abs_det(&Mat::zeros(2, 3)),
            Err(Error::NotSquare { .. })
        ));
    }

    #[test]
    fn log_det_matches_cofactor_expansion() {
        let mut rng = RngStream::new(5, 9);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..4).map(|_| rng.sample_gaussian(4)).collect();
            let det = cofactor_det(&rows);
            let (ld, s) = lu_log_abs_det(&Mat::from_rows(&rows).unwrap()).unwrap();
            assert!((ld - det.abs().ln()).abs() < 1e-10);
            assert_eq!(s, det.signum());
        }
    }

    #[test]
    fn inverse_and_cholesky() {
        let a = Mat::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let prod = a.matmul(&a.inverse().unwrap()).unwrap();
        assert!(prod.frobenius_distance(&Mat::identity(2)) < 1e-14);
        let l = a.cholesky().unwrap();
        let back = l.matmul(&l.transpose()).unwrap();
        assert!(back.frobenius_distance(&a) < 1e-14);
        let x = a.solve(&[1.0, 2.0]).unwrap();
        assert!(sq_dist(&a.matvec(&x).unwrap(), &[1.0, 2.0]) < 1e-28);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut st = AdamState::new(3);
        let mut p = vec![0.0, 1.0, 2.0];
        st.step(&cfg, &mut p, &[3.0, -0.5, 0.0]).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 1.01).abs() < 1e-9);
        assert_eq!(p[2], 2.0);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn sampler_moments() {
        let mut rng = RngStream::new(3, 3);
        let n = 50_000;
        let g: Vec<f64> = (0..n).map(|_| rng.gamma(2.5, 2.0)).collect();
        assert!((mean(&g) - 1.25).abs() < 0.02);
        let p: Vec<f64> = (0..n).map(|_| rng.poisson(3.0) as f64).collect();
        assert!((mean(&p) - 3.0).abs() < 0.05);
    }
}
