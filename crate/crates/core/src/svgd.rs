//! Stein variational transport of particle sets.
//!
//! For particles `θ_1..θ_M` with scores `s_j = ∇ log p̃(θ_j)` the update
//! direction is
//!
//! ```text
//! Δθ_j = (1/M) Σ_j' [ k(θ_j', θ_j) s_j' + ∇_{θ_j'} k(θ_j', θ_j) ]
//! ```
//!
//! with an RBF kernel whose bandwidth is re-derived from the current cloud on
//! every call. Directions are ascent directions; [`ParticleSet::apply_step`]
//! either feeds their negation to Adam or takes a raw `θ + ε Δθ` step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::kernels::{median_bandwidth, BandwidthMode, RbfKernel};
use crate::numcore::{all_finite, AdamConfig, AdamState};

/// Bandwidth selection for one transport call.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KernelPolicy {
    pub mode: BandwidthMode,
    /// Overrides the median heuristic when set.
    pub fixed_bandwidth: Option<f64>,
}

impl KernelPolicy {
    pub fn median(mode: BandwidthMode) -> Self {
        KernelPolicy {
            mode,
            fixed_bandwidth: None,
        }
    }

    pub fn fixed(h: f64) -> Self {
        KernelPolicy {
            mode: BandwidthMode::Squared,
            fixed_bandwidth: Some(h),
        }
    }

    pub fn kernel_for(&self, particles: &[Vec<f64>]) -> Result<RbfKernel> {
        match self.fixed_bandwidth {
            Some(h) => RbfKernel::new(h),
            None => RbfKernel::new(median_bandwidth(particles, self.mode)?),
        }
    }
}

pub(crate) fn check_scores(scores: &[Vec<f64>], dim: usize) -> Result<()> {
    for (index, s) in scores.iter().enumerate() {
        ensure_len("score dimension", dim, s.len())?;
        if !all_finite(s) {
            return Err(Error::NonFiniteScore { index });
        }
    }
    Ok(())
}

/// Stein direction from precomputed scores.
pub fn stein_direction(
    particles: &[Vec<f64>],
    scores: &[Vec<f64>],
    policy: &KernelPolicy,
) -> Result<Vec<Vec<f64>>> {
    let m = particles.len();
    if m == 0 {
        return Err(Error::InvalidArgument("transport needs at least one particle".into()));
    }
    ensure_len("scores per particle", m, scores.len())?;
    let dim = particles[0].len();
    check_scores(scores, dim)?;
    let kernel = policy.kernel_for(particles)?;
    let mf = m as f64;
    Ok(particles
        .par_iter()
        .map(|target| {
            let mut acc = vec![0.0; dim];
            for (src, s) in particles.iter().zip(scores) {
                let k = kernel.eval_unchecked(src, target);
                let c = kernel.grad_coefficient(k);
                for d in 0..dim {
                    acc[d] += k * s[d] + c * (src[d] - target[d]);
                }
            }
            acc.iter_mut().for_each(|v| *v /= mf);
            acc
        })
        .collect())
}

/// Evaluates `score` at every particle (in parallel) and returns the Stein
/// direction. `score` receives the particle index and position.
pub fn svgd_direction<F>(particles: &[Vec<f64>], score: F, policy: &KernelPolicy) -> Result<Vec<Vec<f64>>>
where
    F: Fn(usize, &[f64]) -> Vec<f64> + Sync,
{
    let scores: Vec<Vec<f64>> = particles
        .par_iter()
        .enumerate()
        .map(|(j, p)| score(j, p))
        .collect();
    stein_direction(particles, &scores, policy)
}

/// How a set of particles moves along its deltas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepRule {
    /// Adam minimiser on `-Δ`.
    Adam(AdamConfig),
    /// `θ ← θ + step · Δ`.
    Raw { step: f64 },
}

/// `M` particles of dimension `d` plus their optimiser state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet {
    particles: Vec<Vec<f64>>,
    adam: AdamState,
}

impl ParticleSet {
    pub fn new(particles: Vec<Vec<f64>>) -> Result<Self> {
        let dim = particles
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidArgument("particle set needs M >= 1".into()))?;
        for p in &particles {
            ensure_len("particle dimension", dim, p.len())?;
            if !all_finite(p) {
                return Err(Error::InvalidArgument("non-finite particle".into()));
            }
        }
        let adam = AdamState::new(particles.len() * dim);
        Ok(ParticleSet { particles, adam })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    pub fn particles(&self) -> &[Vec<f64>] {
        &self.particles
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.t
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn into_particles(self) -> Vec<Vec<f64>> {
        self.particles
    }

    pub fn apply_step(&mut self, deltas: &[Vec<f64>], rule: &StepRule) -> Result<()> {
        ensure_len("deltas per particle", self.len(), deltas.len())?;
        let dim = self.dim();
        for d in deltas {
            ensure_len("delta dimension", dim, d.len())?;
        }
        match rule {
            StepRule::Raw { step } => {
                for (p, d) in self.particles.iter_mut().zip(deltas) {
                    for (pi, di) in p.iter_mut().zip(d) {
                        *pi += step * di;
                    }
                }
                self.adam.t += 1;
            }
            StepRule::Adam(cfg) => {
                let mut flat: Vec<f64> = self.particles.concat();
                let grad: Vec<f64> = deltas.iter().flatten().map(|v| -v).collect();
                self.adam.step(cfg, &mut flat, &grad)?;
                for (p, chunk) in self.particles.iter_mut().zip(flat.chunks(dim)) {
                    p.copy_from_slice(chunk);
                }
            }
        }
        Ok(())
    }
}

/// Per-datum latent code samples: `codes[row][j]` is `z_j` for datum
/// `datum_ids[row]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeBank {
    pub datum_ids: Vec<usize>,
    pub codes: Vec<Vec<Vec<f64>>>,
}

impl CodeBank {
    pub fn new(datum_ids: Vec<usize>, codes: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        ensure_len("code bank rows", datum_ids.len(), codes.len())?;
        Ok(CodeBank { datum_ids, codes })
    }

    pub fn row_of(&self, datum: usize) -> Option<usize> {
        self.datum_ids.iter().position(|&d| d == datum)
    }
}

/// Stein direction over the code samples of one datum of the bank.
pub fn svgd_direction_codes<F>(
    bank: &CodeBank,
    row: usize,
    score: F,
    policy: &KernelPolicy,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(usize, &[f64]) -> Vec<f64> + Sync,
{
    let codes = bank
        .codes
        .get(row)
        .ok_or_else(|| Error::InvalidArgument(format!("row {row} not in code bank")))?;
    svgd_direction(codes, score, policy)
}

/// Sample estimate of `∇_ε KL(q_T ‖ p)` at `ε = 0` for `T(θ) = θ + ε ψ(θ)`:
/// `-(1/S) Σ_s [score(θ_s)·ψ(θ_s) + div ψ(θ_s)]`.
pub fn kl_directional_derivative<P, D, S>(samples: &[Vec<f64>], psi: P, div_psi: D, score: S) -> f64
where
    P: Fn(&[f64]) -> Vec<f64> + Sync,
    D: Fn(&[f64]) -> f64 + Sync,
    S: Fn(&[f64]) -> Vec<f64> + Sync,
{
    if samples.is_empty() {
        return 0.0;
    }
    let total: f64 = samples
        .par_iter()
        .map(|t| {
            let s = score(t);
            let p = psi(t);
            s.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() + div_psi(t)
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    -total / samples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngStream;

    fn reference_direction(ps: &[Vec<f64>], scores: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
        let m = ps.len() as f64;
        ps.iter()
            .map(|t| {
                let mut out = vec![0.0; t.len()];
                for (p, s) in ps.iter().zip(scores) {
                    let r2: f64 = p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum();
                    let k = (-r2 / h).exp();
                    for d in 0..t.len() {
                        out[d] += (k * s[d] - 2.0 / h * (p[d] - t[d]) * k) / m;
                    }
                }
                out
            })
            .collect()
    }

    #[test]
    fn single_particle_reduces_to_score() {
        let p = vec![vec![0.3, -1.2, 4.0]];
        let d = svgd_direction(&p, |_, x| x.iter().map(|v| -2.0 * v).collect(), &KernelPolicy::default()).unwrap();
        assert_eq!(d[0], vec![-0.6, 2.4, -8.0]);
    }

    #[test]
    fn two_particle_hand_example() {
        let p = vec![vec![-1.0], vec![1.0]];
        let d = svgd_direction(&p, |_, x| vec![-x[0]], &KernelPolicy::default()).unwrap();
        let expect = 0.5 * (1.0 - 2.0 * (-1.0f64).exp());
        assert!((d[0][0] - expect).abs() < 1e-15);
        assert!((d[1][0] + expect).abs() < 1e-15);
        assert!((d[0][0] - 0.132_120_558_828_558).abs() < 1e-12);
    }

    #[test]
    fn symmetric_cloud_under_even_target_sums_to_zero() {
        let mut rng = RngStream::new(9, 1);
        let half: Vec<Vec<f64>> = (0..6).map(|_| rng.sample_gaussian(2)).collect();
        let mut p = half.clone();
        p.extend(half.iter().map(|v| v.iter().map(|x| -x).collect::<Vec<_>>()));
        let d = svgd_direction(&p, |_, x| x.iter().map(|v| -v * v * v).collect(), &KernelPolicy::default()).unwrap();
        for dim in 0..2 {
            let s: f64 = d.iter().map(|v| v[dim]).sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn codes_direction_matches_reference() {
        let mut rng = RngStream::new(4, 4);
        let codes: Vec<Vec<f64>> = (0..9).map(|_| rng.sample_gaussian(3)).collect();
        let bank = CodeBank::new(vec![17], vec![codes.clone()]).unwrap();
        let score = |_: usize, z: &[f64]| z.iter().map(|v| 1.0 - 0.5 * v).collect::<Vec<f64>>();
        let d = svgd_direction_codes(&bank, 0, score, &KernelPolicy::default()).unwrap();
        let h = median_bandwidth(&codes, BandwidthMode::Squared).unwrap();
        let scores: Vec<Vec<f64>> = codes.iter().map(|z| score(0, z)).collect();
        let r = reference_direction(&codes, &scores, h);
        for (a, b) in d.iter().flatten().zip(r.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        // identical codes: kernel gradients vanish, direction = score
        let same = CodeBank::new(vec![0], vec![vec![vec![0.5, 0.5]; 4]]).unwrap();
        let d = svgd_direction_codes(&same, 0, |_, z| vec![z[0], -z[1]], &KernelPolicy::default()).unwrap();
        for v in d {
            assert_eq!(v, vec![0.5, -0.5]);
        }
        assert_eq!(bank.row_of(17), Some(0));
    }

    #[test]
    fn non_finite_score_names_particle() {
        let p = vec![vec![0.0], vec![1.0], vec![2.0]];
        let err = svgd_direction(&p, |j, _| vec![if j == 2 { f64::NAN } else { 0.0 }], &KernelPolicy::default());
        assert!(matches!(err, Err(Error::NonFiniteScore { index: 2 })));
    }

    #[test]
    fn adam_steps() {
        let mut set = ParticleSet::new(vec![vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let before = set.particles().to_vec();
        let rule = StepRule::Adam(AdamConfig::with_lr(0.1));
        set.apply_step(&[vec![0.0; 2], vec![0.0; 2]], &rule).unwrap();
        assert_eq!(set.particles(), &before[..]);
        assert_eq!(set.steps_taken(), 1);

        let mut set = ParticleSet::new(vec![vec![0.0, 1.0]]).unwrap();
        set.apply_step(&[vec![5.0, -0.01]], &StepRule::Adam(AdamConfig::with_lr(0.1))).unwrap();
        assert!((set.particles()[0][0] - 0.1).abs() < 1e-7);
        assert!((set.particles()[0][1] - 0.9).abs() < 1e-5);

        assert!(set.apply_step(&[vec![1.0]], &rule).is_err());
        assert!(set.apply_step(&[vec![1.0, 1.0], vec![1.0, 1.0]], &rule).is_err());

        let mut raw = ParticleSet::new(vec![vec![1.0]]).unwrap();
        raw.apply_step(&[vec![2.0]], &StepRule::Raw { step: 0.25 }).unwrap();
        assert_eq!(raw.particles()[0][0], 1.5);
    }

    #[test]
    fn kl_derivative_zero_field() {
        let s = vec![vec![0.1], vec![2.0]];
        let v = kl_directional_derivative(&s, |_| vec![0.0], |_| 0.0, |t| vec![-t[0]]);
        assert_eq!(v, 0.0);
    }
}
