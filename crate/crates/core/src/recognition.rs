//! The amortised sampler `z = f_η(x, ξ)`: drawing codes, regressing onto
//! Stein-refined codes, and the change-of-variables code density.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::nn::{Activation, Layer, Mlp};
use crate::numcore::{all_finite, lu_log_abs_det, std_normal_log_density, AdamConfig, AdamState, Mat, RngStream};

/// How `fit_codes` moves η.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FitRule {
    /// `η ← η - δ ∇η loss`.
    Gradient { lr: f64 },
    /// Adam on the same loss; the moments persist across calls.
    Adam(AdamConfig),
}

impl Default for FitRule {
    fn default() -> Self {
        FitRule::Gradient { lr: DEFAULT_FIT_LR }
    }
}

pub const DEFAULT_FIT_LR: f64 = 1e-3;
pub const DEFAULT_FIT_STEPS: usize = 5;
pub const DEFAULT_HIDDEN: usize = 100;

/// Codes of one datum and where they should move.
#[derive(Debug, Clone, Copy)]
pub struct FitItem<'a> {
    pub x: &'a [f64],
    pub noise: &'a [Vec<f64>],
    pub targets: &'a [Vec<f64>],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionNet {
    net: Mlp,
    data_dim: usize,
    noise_dim: usize,
    adam: AdamState,
}

impl RecognitionNet {
    /// Wraps an MLP over `concat(x, ξ)` whose output has the noise dimension.
    pub fn from_mlp(net: Mlp, data_dim: usize) -> Result<Self> {
        let noise_dim = net.output_dim();
        ensure_len("recognition input", data_dim + noise_dim, net.input_dim())?;
        let adam = AdamState::new(net.param_count());
        Ok(RecognitionNet {
            net,
            data_dim,
            noise_dim,
            adam,
        })
    }

    /// `[d_x + d_z] → hidden... → d_z` with `activation` on hidden layers and
    /// a linear output.
    pub fn random(
        data_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut sizes = vec![data_dim + latent_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(latent_dim);
        let mut acts = vec![activation; hidden.len()];
        acts.push(Activation::Identity);
        RecognitionNet::from_mlp(Mlp::random(&sizes, &acts, rng)?, data_dim)
    }

    /// Single linear layer `f(x, ξ) = Bx + Aξ + c`.
    pub fn linear(b: &Mat, a: &Mat, c: Vec<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::NotSquare {
                rows: a.rows(),
                cols: a.cols(),
            });
        }
        ensure_len("linear recognition B rows", a.rows(), b.rows())?;
        let (dz, dx) = (a.rows(), b.cols());
        let mut w = Mat::zeros(dz, dx + dz);
        for i in 0..dz {
            for j in 0..dx {
                w.set(i, j, b.get(i, j));
            }
            for j in 0..dz {
                w.set(i, dx + j, a.get(i, j));
            }
        }
        let layer = Layer::new(w, c, Activation::Identity)?;
        RecognitionNet::from_mlp(Mlp::from_layers(vec![layer])?, dx)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.noise_dim
    }

    fn input(&self, x: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        ensure_len("recognition x", self.data_dim, x.len())?;
        ensure_len("recognition noise", self.noise_dim, xi.len())?;
        let mut v = Vec::with_capacity(x.len() + xi.len());
        v.extend_from_slice(x);
        v.extend_from_slice(xi);
        Ok(v)
    }

    pub fn draw_code(&self, x: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        self.net.eval(&self.input(x, xi)?)
    }

    /// `z_j = f_η(x, ξ_j)` for every noise vector.
    pub fn draw_codes(&self, x: &[f64], noise: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        noise.iter().map(|xi| self.draw_code(x, xi)).collect()
    }

    /// `Σ_n Σ_j ‖f(x_n, ξ_j) - z'_j‖²` and its gradient with respect to the
    /// flat parameters (cotangent `2(f - z')`).
    pub fn fit_objective(&self, params: &[f64], batch: &[FitItem<'_>]) -> Result<(f64, Vec<f64>)> {
        let parts: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .map(|item| self.item_objective(params, item))
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.net.param_count()];
        for (l, g) in parts {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok((loss, grad))
    }

    fn item_objective(&self, params: &[f64], item: &FitItem<'_>) -> Result<(f64, Vec<f64>)> {
        ensure_len("fit targets per noise draw", item.noise.len(), item.targets.len())?;
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.net.param_count()];
        for (xi, target) in item.noise.iter().zip(item.targets) {
            ensure_len("fit target", self.noise_dim, target.len())?;
            if !all_finite(target) {
                return Err(Error::InvalidArgument("non-finite fit target".into()));
            }
            let (out, tape) = self.net.forward_with(params, &self.input(item.x, xi)?)?;
            let resid: Vec<f64> = out.iter().zip(target).map(|(f, t)| f - t).collect();
            loss += resid.iter().map(|r| r * r).sum::<f64>();
            let cot: Vec<f64> = resid.iter().map(|r| 2.0 * r).collect();
            self.net.accumulate_with(params, &tape, &cot, &mut grad)?;
        }
        Ok((loss, grad))
    }

    /// The loss of [`RecognitionNet::fit_objective`] without the gradient.
    pub fn fit_loss(&self, params: &[f64], batch: &[FitItem<'_>]) -> Result<f64> {
        let parts: Vec<f64> = batch
            .par_iter()
            .map(|item| {
                let mut loss = 0.0;
                for (xi, target) in item.noise.iter().zip(item.targets) {
                    let (out, _) = self.net.forward_with(params, &self.input(item.x, xi)?)?;
                    loss += out.iter().zip(target).map(|(f, t)| (f - t) * (f - t)).sum::<f64>();
                }
                Ok(loss)
            })
            .collect::<Result<_>>()?;
        Ok(parts.iter().sum())
    }

    /// `steps` updates of η towards the targets. Returns the loss before each
    /// step followed by the loss after the last one.
    pub fn fit_codes(&mut self, batch: &[FitItem<'_>], steps: usize, rule: &FitRule) -> Result<Vec<f64>> {
        if steps < 1 {
            return Err(Error::InvalidArgument("fit_codes needs at least one step".into()));
        }
        let mut params = self.net.params().to_vec();
        let mut trace = Vec::with_capacity(steps + 1);
        for _ in 0..steps {
            let (loss, grad) = self.fit_objective(&params, batch)?;
            trace.push(loss);
            if grad.iter().all(|g| *g == 0.0) {
                continue;
            }
            match rule {
                FitRule::Gradient { lr } => {
                    params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= lr * g);
                }
                FitRule::Adam(cfg) => self.adam.step(cfg, &mut params, &grad)?,
            }
        }
        trace.push(self.fit_loss(&params, batch)?);
        self.net.set_params(&params)?;
        Ok(trace)
    }

    /// `log q0(ξ) - log|det ∂f/∂ξ|` for `z = f(x, ξ)`.
    pub fn code_log_density(&self, x: &[f64], xi: &[f64]) -> Result<f64> {
        let input = self.input(x, xi)?;
        let jac = self
            .net
            .input_jacobian(&input, self.data_dim..self.data_dim + self.noise_dim)?;
        let (logdet, sign) = lu_log_abs_det(&jac)?;
        if sign == 0.0 || !logdet.is_finite() {
            return Err(Error::NonInvertibleCodeMap);
        }
        Ok(std_normal_log_density(xi) - logdet)
    }

    /// Code and its log density from one forward pass plus the Jacobian.
    pub fn draw_with_density(&self, x: &[f64], xi: &[f64]) -> Result<(Vec<f64>, f64)> {
        Ok((self.draw_code(x, xi)?, self.code_log_density(x, xi)?))
    }
}
