//! Multilayer perceptrons with hand-written reverse mode.
//!
//! Parameters are exposed as one flat vector, laid out layer by layer as the
//! row-major weight matrix followed by the bias. Gradients returned by
//! [`Mlp::backward`] use the same layout.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::numcore::{sigmoid, softplus, Mat, RngStream};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn fresh_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Softplus,
    LeakyRelu { slope: f64 },
    Identity,
    Softmax,
}

impl Activation {
    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    fn apply(&self, pre: &[f64]) -> Vec<f64> {
        match *self {
            Activation::Tanh => pre.iter().map(|v| v.tanh()).collect(),
            Activation::Softplus => pre.iter().map(|&v| softplus(v)).collect(),
            Activation::LeakyRelu { slope } => pre
                .iter()
                .map(|&v| if v > 0.0 { v } else { slope * v })
                .collect(),
            Activation::Identity => pre.to_vec(),
            Activation::Softmax => {
                let max = pre.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = pre.iter().map(|v| (v - max).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            }
        }
    }

    /// Maps the cotangent of the activation output back to the pre-activation.
    fn pullback(&self, pre: &[f64], post: &[f64], cot: &[f64]) -> Vec<f64> {
        match *self {
            Activation::Tanh => post
                .iter()
                .zip(cot)
                .map(|(y, g)| g * (1.0 - y * y))
                .collect(),
            Activation::Softplus => pre.iter().zip(cot).map(|(x, g)| g * sigmoid(*x)).collect(),
            Activation::LeakyRelu { slope } => pre
                .iter()
                .zip(cot)
                .map(|(x, g)| if *x > 0.0 { *g } else { slope * g })
                .collect(),
            Activation::Identity => cot.to_vec(),
            Activation::Softmax => {
                let sg: f64 = post.iter().zip(cot).map(|(s, g)| s * g).sum();
                post.iter().zip(cot).map(|(s, g)| s * (g - sg)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Mat, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        ensure_len("Layer bias", weights.rows(), bias.len())?;
        Ok(Layer {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }
}

/// Architecture of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    shapes: Vec<LayerShape>,
    params: Vec<f64>,
    #[serde(skip, default = "fresh_revision")]
    revision: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.shapes == other.shapes && self.params == other.params
    }
}

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `None` when produced from an external parameter vector.
    revision: Option<u64>,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.post.last().map_or(&self.input, Vec::as_slice)
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("an MLP needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            ensure_len("Mlp layer chaining", w[0].out_dim(), w[1].in_dim())?;
        }
        if layers[..layers.len() - 1]
            .iter()
            .any(|l| l.activation == Activation::Softmax)
        {
            return Err(Error::InvalidArgument(
                "softmax is only allowed as the final activation".into(),
            ));
        }
        let shapes = layers
            .iter()
            .map(|l| LayerShape {
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
                activation: l.activation,
            })
            .collect();
        let mut params = Vec::with_capacity(layers.iter().map(Layer::param_count).sum());
        for l in &layers {
            params.extend_from_slice(l.weights.as_slice());
            params.extend_from_slice(&l.bias);
        }
        Ok(Mlp {
            shapes,
            params,
            revision: fresh_revision(),
        })
    }

    /// Random network with weights `N(0, 1/fan_in)` and zero biases.
    /// `sizes` lists every width from input to output; `activations` has one
    /// entry per layer.
    pub fn random(sizes: &[usize], activations: &[Activation], rng: &mut RngStream) -> Result<Self> {
        ensure_len("Mlp::random activations", sizes.len().saturating_sub(1), activations.len())?;
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = 1.0 / (fan_in as f64).sqrt();
                let data = rng
                    .sample_gaussian(fan_in * fan_out)
                    .into_iter()
                    .map(|v| v * scale)
                    .collect();
                Layer::new(Mat::from_vec(fan_out, fan_in, data)?, vec![0.0; fan_out], act)
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_layers(layers)
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    /// Materialised copy of each layer.
    pub fn layers(&self) -> Vec<Layer> {
        let mut off = 0;
        self.shapes
            .iter()
            .map(|s| {
                let nw = s.in_dim * s.out_dim;
                let w = Mat::from_vec(s.out_dim, s.in_dim, self.params[off..off + nw].to_vec())
                    .expect("shape bookkeeping");
                let b = self.params[off + nw..off + nw + s.out_dim].to_vec();
                off += s.param_count();
                Layer {
                    weights: w,
                    bias: b,
                    activation: s.activation,
                }
            })
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.shapes[self.shapes.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        ensure_len("Mlp::set_params", self.param_count(), params.len())?;
        self.params.copy_from_slice(params);
        self.revision = fresh_revision();
        Ok(())
    }

    /// Copy of this network with a different parameter vector.
    pub fn with_params(&self, params: &[f64]) -> Result<Mlp> {
        let mut net = self.clone();
        net.set_params(params)?;
        Ok(net)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let (out, mut tape) = self.forward_with(&self.params, input)?;
        tape.revision = Some(self.revision);
        Ok((out, tape))
    }

    /// Forward pass of this architecture under an external parameter vector.
    pub fn forward_with(&self, params: &[f64], input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        ensure_len("Mlp::forward params", self.param_count(), params.len())?;
        ensure_len("Mlp::forward input", self.input_dim(), input.len())?;
        let mut pre = Vec::with_capacity(self.shapes.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.shapes.len());
        let mut off = 0;
        for s in &self.shapes {
            let x = post.last().map_or(input, Vec::as_slice);
            let nw = s.in_dim * s.out_dim;
            let w = &params[off..off + nw];
            let b = &params[off + nw..off + nw + s.out_dim];
            let z: Vec<f64> = (0..s.out_dim)
                .map(|i| {
                    let row = &w[i * s.in_dim..(i + 1) * s.in_dim];
                    row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b[i]
                })
                .collect();
            let y = s.activation.apply(&z);
            pre.push(z);
            post.push(y);
            off += s.param_count();
        }
        let tape = Tape {
            revision: None,
            input: input.to_vec(),
            pre,
            post,
        };
        Ok((tape.output().to_vec(), tape))
    }

    /// Output only.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_with(&self.params, input)?.0)
    }

    /// Reverse-mode gradients of `⟨cotangent, output⟩` with respect to the
    /// flat parameters and the input.
    pub fn backward(&self, tape: &Tape, cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_tape(tape)?;
        self.backward_with(&self.params, tape, cotangent)
    }

    /// Input gradient only; skips the parameter outer products.
    pub fn input_grad(&self, tape: &Tape, cotangent: &[f64]) -> Result<Vec<f64>> {
        self.check_tape(tape)?;
        self.backprop(&self.params, tape, cotangent, None)
    }

    /// Backward pass for a tape produced by [`Mlp::forward_with`] under the
    /// same `params`.
    pub fn backward_with(&self, params: &[f64], tape: &Tape, cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.param_count()];
        let input_grad = self.backprop(params, tape, cotangent, Some(&mut grads))?;
        Ok((grads, input_grad))
    }

    /// Like [`Mlp::backward_with`] but adds the parameter gradient into
    /// `grads`.
    pub fn accumulate_with(&self, params: &[f64], tape: &Tape, cotangent: &[f64], grads: &mut Vec<f64>) -> Result<Vec<f64>> {
        ensure_len("Mlp::accumulate grads", self.param_count(), grads.len())?;
        self.backprop(params, tape, cotangent, Some(grads))
    }

    pub fn input_grad_with(&self, params: &[f64], tape: &Tape, cotangent: &[f64]) -> Result<Vec<f64>> {
        self.backprop(params, tape, cotangent, None)
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if tape.revision != Some(self.revision) {
            return Err(Error::StaleTape);
        }
        Ok(())
    }

    fn backprop(
        &self,
        params: &[f64],
        tape: &Tape,
        cotangent: &[f64],
        mut grads: Option<&mut Vec<f64>>,
    ) -> Result<Vec<f64>> {
        if tape.pre.len() != self.shapes.len() {
            return Err(Error::StaleTape);
        }
        ensure_len("Mlp::backward params", self.param_count(), params.len())?;
        ensure_len("Mlp::backward cotangent", self.output_dim(), cotangent.len())?;
        let mut offsets = Vec::with_capacity(self.shapes.len());
        let mut off = 0;
        for s in &self.shapes {
            offsets.push(off);
            off += s.param_count();
        }
        let mut cot = cotangent.to_vec();
        for (li, s) in self.shapes.iter().enumerate().rev() {
            let delta = s.activation.pullback(&tape.pre[li], &tape.post[li], &cot);
            let x = if li == 0 { &tape.input } else { &tape.post[li - 1] };
            let base = offsets[li];
            let (rows, cols) = (s.out_dim, s.in_dim);
            if let Some(g) = grads.as_deref_mut() {
                for i in 0..rows {
                    let di = delta[i];
                    if di != 0.0 {
                        let dst = &mut g[base + i * cols..base + (i + 1) * cols];
                        for (d, xj) in dst.iter_mut().zip(x) {
                            *d += di * xj;
                        }
                    }
                }
                let bbase = base + rows * cols;
                for i in 0..rows {
                    g[bbase + i] += delta[i];
                }
            }
            let w = &params[base..base + rows * cols];
            let mut next = vec![0.0; cols];
            for i in 0..rows {
                let di = delta[i];
                if di != 0.0 {
                    for (n, wij) in next.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
                        *n += di * wij;
                    }
                }
            }
            cot = next;
        }
        Ok(cot)
    }

    /// `∂output_i / ∂input_j` for `j` in `wrt`, one backward pass per row.
    pub fn input_jacobian(&self, input: &[f64], wrt: Range<usize>) -> Result<Mat> {
        if wrt.end > self.input_dim() || wrt.start > wrt.end {
            return Err(Error::InvalidArgument(format!(
                "jacobian range {:?} outside input dimension {}",
                wrt,
                self.input_dim()
            )));
        }
        let (_, tape) = self.forward(input)?;
        let out_dim = self.output_dim();
        let mut jac = Mat::zeros(out_dim, wrt.len());
        let mut e = vec![0.0; out_dim];
        for i in 0..out_dim {
            e[i] = 1.0;
            let g = self.input_grad(&tape, &e)?;
            e[i] = 0.0;
            for (c, j) in wrt.clone().enumerate() {
                jac.set(i, c, g[j]);
            }
        }
        Ok(jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(rows: Vec<Vec<f64>>, bias: Vec<f64>, act: Activation) -> Mlp {
        Mlp::from_layers(vec![Layer::new(Mat::from_rows(&rows).unwrap(), bias, act).unwrap()]).unwrap()
    }

    fn fd_param_grad(net: &Mlp, x: &[f64], u: &[f64], eps: f64) -> Vec<f64> {
        let p = net.params().to_vec();
        (0..p.len())
            .map(|i| {
                let mut hi = p.clone();
                hi[i] += eps;
                let mut lo = p.clone();
                lo[i] -= eps;
                let f = |q: &[f64]| {
                    let y = net.with_params(q).unwrap().eval(x).unwrap();
                    y.iter().zip(u).map(|(a, b)| a * b).sum::<f64>()
                };
                (f(&hi) - f(&lo)) / (2.0 * eps)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn identity_and_zero_layers() {
        let id = linear(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0], Activation::Identity);
        assert_eq!(id.eval(&[0.3, -2.0]).unwrap(), vec![0.3, -2.0]);
        let z = linear(vec![vec![0.0, 0.0]], vec![0.0], Activation::Tanh);
        assert_eq!(z.eval(&[5.0, 1.0]).unwrap(), vec![0.0]);
        let j = id.input_jacobian(&[0.1, 0.2], 0..2).unwrap();
        assert_eq!(j, Mat::identity(2));
    }

    #[test]
    fn two_layer_forward_matches_recomputation() {
        let mut rng = RngStream::new(1, 1);
        let net = Mlp::random(&[3, 4, 2], &[Activation::Tanh, Activation::Identity], &mut rng).unwrap();
        let x = [0.5, -1.0, 2.0];
        let out = net.eval(&x).unwrap();
        let layers = net.layers();
        let (l0, l1) = (&layers[0], &layers[1]);
        let h: Vec<f64> = (0..4)
            .map(|i| ((0..3).map(|j| l0.weights.get(i, j) * x[j]).sum::<f64>() + l0.bias[i]).tanh())
            .collect();
        for i in 0..2 {
            let y: f64 = (0..4).map(|j| l1.weights.get(i, j) * h[j]).sum::<f64>() + l1.bias[i];
            assert!((y - out[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_layer_gradients_are_analytic() {
        let w = vec![vec![1.0, 2.0, -1.0], vec![0.5, 0.0, 3.0]];
        let net = linear(w.clone(), vec![0.1, -0.2], Activation::Identity);
        let x = [1.0, -2.0, 0.5];
        let u = [0.7, -1.3];
        let (_, tape) = net.forward(&x).unwrap();
        let (pg, ig) = net.backward(&tape, &u).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(pg[i * 3 + j], u[i] * x[j]);
            }
            assert_eq!(pg[6 + i], u[i]);
        }
        for j in 0..3 {
            let expect = w[0][j] * u[0] + w[1][j] * u[1];
            assert!((ig[j] - expect).abs() < 1e-15);
        }
        let (pg0, ig0) = net.backward(&tape, &[0.0, 0.0]).unwrap();
        assert!(pg0.iter().chain(&ig0).all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences_for_every_activation() {
        let acts = [
            Activation::Tanh,
            Activation::Softplus,
            Activation::leaky_relu(),
            Activation::Identity,
        ];
        let mut rng = RngStream::new(7, 0);
        for (k, act) in acts.iter().enumerate() {
            for last in [Activation::Identity, Activation::Softmax] {
                let net = Mlp::random(&[3, 5, 4], &[*act, last], &mut rng).unwrap();
                let x = rng.sample_gaussian(3);
                let u = rng.sample_gaussian(4);
                let (_, tape) = net.forward(&x).unwrap();
                let (pg, ig) = net.backward(&tape, &u).unwrap();
                let fd = fd_param_grad(&net, &x, &u, 1e-5);
                for (a, b) in pg.iter().zip(&fd) {
                    assert!(rel_err(*a, *b) < 1e-4 || (a - b).abs() < 1e-9, "act {k}: {a} vs {b}");
                }
                let jac = net.input_jacobian(&x, 0..3).unwrap();
                let jtu = jac.tr_matvec(&u).unwrap();
                for (a, b) in jtu.iter().zip(&ig) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = RngStream::new(3, 0);
        let mut net = Mlp::random(&[2, 2], &[Activation::Tanh], &mut rng).unwrap();
        let (_, tape) = net.forward(&[1.0, 1.0]).unwrap();
        let p = net.params().to_vec();
        net.set_params(&p).unwrap();
        assert!(matches!(net.backward(&tape, &[1.0, 0.0]), Err(Error::StaleTape)));
    }

    #[test]
    fn rejects_bad_shapes() {
        let net = linear(vec![vec![1.0, 0.0]], vec![0.0], Activation::Identity);
        assert!(net.forward(&[1.0]).is_err());
        let sm = Layer::new(Mat::identity(2), vec![0.0; 2], Activation::Softmax).unwrap();
        let id = Layer::new(Mat::identity(2), vec![0.0; 2], Activation::Identity).unwrap();
        assert!(Mlp::from_layers(vec![sm, id]).is_err());
        assert!(net.input_jacobian(&[1.0, 2.0], 1..3).is_err());
    }

    #[test]
    fn softplus_is_overflow_safe() {
        let net = linear(vec![vec![1.0]], vec![0.0], Activation::Softplus);
        assert_eq!(net.eval(&[800.0]).unwrap(), vec![800.0]);
        assert!(net.eval(&[-800.0]).unwrap()[0] >= 0.0);
    }
}
