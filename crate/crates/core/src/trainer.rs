//! Training loops. Every minibatch draws codes from the recognition net,
//! transports them, transports the decoder particles against the refined
//! codes, and finally regresses the recognition net onto the refined codes.
//!
//! All randomness comes from streams keyed by `(seed, purpose, epoch,
//! minibatch)`, so an epoch is reproducible bit for bit and no generator
//! state needs to be checkpointed.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iwsvgd::{iw_direction_theta, iw_direction_z, kde_log_density, WeightVector};
use crate::models::{Decoder, LogDensity, NormalPrior, SoftmaxLabelDecoder};
use crate::numcore::{AdamConfig, RngStream};
use crate::recognition::{FitItem, FitRule, RecognitionNet, DEFAULT_FIT_STEPS};
use crate::svgd::{stein_direction, CodeBank, KernelPolicy, ParticleSet, StepRule};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Vae,
    Viwae,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Vae => "vae",
            Method::Viwae => "viwae",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vae" => Some(Method::Vae),
            "viwae" => Some(Method::Viwae),
            _ => None,
        }
    }
}

/// Which decoder particles enter the score of a code (and which codes enter
/// the score of a decoder particle).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThetaAveraging {
    /// Every code sees every decoder particle.
    All,
    /// Code `j` is paired with decoder particle `j mod M_θ`.
    Paired,
}

impl ThetaAveraging {
    pub fn as_str(&self) -> &'static str {
        match self {
            ThetaAveraging::All => "all",
            ThetaAveraging::Paired => "paired",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(ThetaAveraging::All),
            "paired" => Some(ThetaAveraging::Paired),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Code samples per datum and group (`M`).
    pub particles: usize,
    /// Decoder particles per group; defaults to `particles`.
    pub theta_particles: Option<usize>,
    /// Groups `k` for the importance-weighted method.
    pub iw_samples: usize,
    pub method: Method,
    pub batch: usize,
    /// Labeled items per minibatch in semi-supervised runs.
    pub labeled_batch: Option<usize>,
    pub epochs: usize,
    /// Adam learning rate for decoder particles.
    pub lr: f64,
    /// Adam learning rate for label-decoder particles.
    pub label_lr: f64,
    pub code_step: StepRule,
    pub fit_rule: FitRule,
    pub fit_steps: usize,
    pub seed: u64,
    pub zeta: Option<f64>,
    pub kernel: KernelPolicy,
    pub shared_noise: bool,
    pub theta_averaging: ThetaAveraging,
    pub shuffle: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            particles: 100,
            theta_particles: None,
            iw_samples: 50,
            method: Method::Vae,
            batch: 64,
            labeled_batch: None,
            epochs: 10,
            lr: 2e-4,
            label_lr: 2e-4,
            code_step: StepRule::Raw { step: 1e-3 },
            fit_rule: FitRule::default(),
            fit_steps: DEFAULT_FIT_STEPS,
            seed: 0,
            zeta: None,
            kernel: KernelPolicy::default(),
            shared_noise: true,
            theta_averaging: ThetaAveraging::All,
            shuffle: true,
        }
    }
}

impl RunConfig {
    pub fn groups(&self) -> usize {
        match self.method {
            Method::Vae => 1,
            Method::Viwae => self.iw_samples,
        }
    }

    pub fn theta_count(&self) -> usize {
        self.theta_particles.unwrap_or(self.particles)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.particles < 1 || self.theta_count() < 1 {
            return bad("particle counts must be at least 1");
        }
        if self.iw_samples < 1 {
            return bad("iw_samples must be at least 1");
        }
        if self.batch < 1 || self.labeled_batch == Some(0) {
            return bad("minibatch sizes must be at least 1");
        }
        if self.fit_steps < 1 {
            return bad("fit_steps must be at least 1");
        }
        if !(self.lr > 0.0 && self.label_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }
}

/// Label likelihood for semi-supervised runs.
#[derive(Debug, Clone)]
pub struct LabelModel {
    pub decoder: SoftmaxLabelDecoder,
    pub prior: NormalPrior,
}

/// Everything the loop needs to evaluate scores.
#[derive(Debug, Clone)]
pub struct Model {
    pub decoder: Arc<dyn Decoder>,
    pub latent_prior: Arc<dyn LogDensity>,
    pub theta_prior: Arc<dyn LogDensity>,
    /// When false the decoder particles stay where they were initialised.
    pub learn_theta: bool,
    pub labels: Option<LabelModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: u64,
    /// `None` for epoch-level metrics.
    pub minibatch: Option<u64>,
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub format_version: u32,
    /// One particle set per importance-weighting group.
    pub theta: Vec<ParticleSet>,
    pub label_theta: Option<Vec<ParticleSet>>,
    pub recognition: RecognitionNet,
    /// Refined codes of the most recent minibatch; within a row the groups
    /// are concatenated.
    pub last_codes: Option<CodeBank>,
    pub epoch: u64,
    pub history: Vec<MetricRecord>,
}

impl TrainState {
    pub fn new(theta: Vec<ParticleSet>, label_theta: Option<Vec<ParticleSet>>, recognition: RecognitionNet) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidArgument("at least one decoder particle group is required".into()));
        }
        if let Some(l) = &label_theta {
            if l.len() != theta.len() {
                return Err(Error::dims("label particle groups", theta.len(), l.len()));
            }
        }
        Ok(TrainState {
            format_version: CHECKPOINT_VERSION,
            theta,
            label_theta,
            recognition,
            last_codes: None,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn record(&mut self, minibatch: Option<u64>, name: &str, value: f64) {
        self.history.push(MetricRecord {
            epoch: self.epoch,
            minibatch,
            name: name.to_string(),
            value,
        });
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let state: TrainState = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if state.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {CHECKPOINT_VERSION})",
                state.format_version
            )));
        }
        Ok(state)
    }
}

/// `k` groups of `m` particles drawn from `N(0, scale² I)`.
pub fn gaussian_groups(rng: &mut RngStream, k: usize, m: usize, dim: usize, scale: f64) -> Result<Vec<ParticleSet>> {
    (0..k)
        .map(|_| {
            ParticleSet::new(
                (0..m)
                    .map(|_| rng.sample_gaussian(dim).into_iter().map(|v| v * scale).collect())
                    .collect(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub(crate) enum StreamKind {
    Shuffle = 1,
    Noise = 2,
    LabeledShuffle = 3,
}

pub(crate) fn stream_rng(seed: u64, kind: StreamKind, epoch: u64, minibatch: u64) -> RngStream {
    RngStream::new(seed, ((kind as u64) << 56) | (epoch << 28) | minibatch)
}

/// `ζ = N_X / (C ρ)`.
pub fn balance_weight(data_dim: usize, classes: usize, labeled_fraction: f64) -> f64 {
    data_dim as f64 / (classes as f64 * labeled_fraction)
}

/// Labeled training items.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub x: &'a [Vec<f64>],
    pub y: &'a [usize],
}

struct Item<'a> {
    id: usize,
    x: &'a [f64],
    label: Option<usize>,
    /// Multiplier turning a minibatch sum into a full-data estimate.
    scale: f64,
}

/// One Stein VAE pass over `data`.
pub fn stein_vae_epoch(state: &mut TrainState, model: &Model, data: &[Vec<f64>], cfg: &RunConfig) -> Result<()> {
    run_epoch(state, model, data, None, cfg, false)
}

/// One importance-weighted pass; the number of groups is `state.theta.len()`.
pub fn stein_viwae_epoch(state: &mut TrainState, model: &Model, data: &[Vec<f64>], cfg: &RunConfig) -> Result<()> {
    run_epoch(state, model, data, None, cfg, true)
}

/// One semi-supervised pass; the method in `cfg` decides whether the
/// transport is importance weighted.
pub fn semisup_epoch(
    state: &mut TrainState,
    model: &Model,
    unlabeled: &[Vec<f64>],
    labeled: Labeled<'_>,
    cfg: &RunConfig,
) -> Result<()> {
    if labeled.x.is_empty() {
        return Err(Error::InvalidArgument("semi-supervised training needs labeled data".into()));
    }
    if labeled.x.len() != labeled.y.len() {
        return Err(Error::dims("labels", labeled.x.len(), labeled.y.len()));
    }
    if model.labels.is_none() || state.label_theta.is_none() {
        return Err(Error::InvalidArgument("semi-supervised training needs a label model".into()));
    }
    run_epoch(state, model, unlabeled, Some(labeled), cfg, cfg.method == Method::Viwae)
}

/// Dispatches on `cfg.method`.
pub fn train_epoch(
    state: &mut TrainState,
    model: &Model,
    data: &[Vec<f64>],
    labeled: Option<Labeled<'_>>,
    cfg: &RunConfig,
) -> Result<()> {
    match labeled {
        Some(l) => semisup_epoch(state, model, data, l, cfg),
        None => run_epoch(state, model, data, None, cfg, cfg.method == Method::Viwae),
    }
}

fn run_epoch(
    state: &mut TrainState,
    model: &Model,
    data: &[Vec<f64>],
    labeled: Option<Labeled<'_>>,
    cfg: &RunConfig,
    weighted: bool,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    for x in data.iter().chain(labeled.iter().flat_map(|l| l.x.iter())) {
        model.decoder.check_datum(x)?;
    }
    let epoch = state.epoch;
    let mut order: Vec<usize> = (0..data.len()).collect();
    if cfg.shuffle {
        stream_rng(cfg.seed, StreamKind::Shuffle, epoch, 0).shuffle(&mut order);
    }
    let mut lab_order: Vec<usize> = labeled.map(|l| (0..l.x.len()).collect()).unwrap_or_default();
    if cfg.shuffle {
        stream_rng(cfg.seed, StreamKind::LabeledShuffle, epoch, 0).shuffle(&mut lab_order);
    }
    let n_u = data.len();
    let n_l = lab_order.len();
    let b_l = cfg.labeled_batch.unwrap_or(cfg.batch).min(n_l);
    for (mb, chunk) in order.chunks(cfg.batch).enumerate() {
        let mut items: Vec<Item> = chunk
            .iter()
            .map(|&i| Item {
                id: i,
                x: &data[i],
                label: None,
                scale: n_u as f64 / chunk.len() as f64,
            })
            .collect();
        if let Some(l) = labeled {
            for t in 0..b_l {
                let i = lab_order[(mb * b_l + t) % n_l];
                items.push(Item {
                    id: n_u + i,
                    x: &l.x[i],
                    label: Some(l.y[i]),
                    scale: n_l as f64 / b_l as f64,
                });
            }
        }
        minibatch_step(state, model, &items, cfg, weighted, mb as u64).map_err(|e| e.in_minibatch("trainer", mb))?;
    }
    state.epoch += 1;
    Ok(())
}

fn paired_thetas(averaging: ThetaAveraging, j: usize, m_theta: usize) -> Vec<usize> {
    match averaging {
        ThetaAveraging::All => (0..m_theta).collect(),
        ThetaAveraging::Paired => vec![j % m_theta],
    }
}

fn paired_codes(averaging: ThetaAveraging, j: usize, m_theta: usize, m: usize) -> Vec<usize> {
    match averaging {
        ThetaAveraging::All => (0..m).collect(),
        ThetaAveraging::Paired => {
            let v: Vec<usize> = (j..m).step_by(m_theta).collect();
            if v.is_empty() {
                vec![j % m]
            } else {
                v
            }
        }
    }
}

fn add_scaled(acc: &mut [f64], v: &[f64], s: f64) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += s * b);
}

fn minibatch_step(
    state: &mut TrainState,
    model: &Model,
    items: &[Item<'_>],
    cfg: &RunConfig,
    weighted: bool,
    mb: u64,
) -> Result<()> {
    let k = state.theta.len();
    let m = cfg.particles;
    let rec = &state.recognition;
    let dz = rec.latent_dim();
    let mut rng = stream_rng(cfg.seed, StreamKind::Noise, state.epoch, mb);
    let draw_block = |rng: &mut RngStream| -> Vec<Vec<Vec<f64>>> {
        (0..k).map(|_| (0..m).map(|_| rng.sample_gaussian(dz)).collect()).collect()
    };
    let noise: Vec<Vec<Vec<Vec<f64>>>> = if cfg.shared_noise {
        vec![draw_block(&mut rng)]
    } else {
        items.iter().map(|_| draw_block(&mut rng)).collect()
    };
    let noise_of = |n: usize| if cfg.shared_noise { &noise[0] } else { &noise[n] };

    // codes[n][i][j]
    let codes: Vec<Vec<Vec<Vec<f64>>>> = items
        .par_iter()
        .enumerate()
        .map(|(n, it)| noise_of(n).iter().map(|g| rec.draw_codes(it.x, g)).collect())
        .collect::<Result<_>>()?;

    let theta_owned: Vec<Vec<Vec<f64>>> = state.theta.iter().map(|s| s.particles().to_vec()).collect();
    let thetas: Vec<&[Vec<f64>]> = theta_owned.iter().map(Vec::as_slice).collect();
    let label_owned: Option<Vec<Vec<Vec<f64>>>> = state
        .label_theta
        .as_ref()
        .map(|sets| sets.iter().map(|s| s.particles().to_vec()).collect());
    let labels: Option<(&LabelModel, Vec<&[Vec<f64>]>)> = match (&model.labels, &label_owned) {
        (Some(lm), Some(sets)) => Some((lm, sets.iter().map(Vec::as_slice).collect())),
        _ => None,
    };
    let mut metrics: Vec<(&'static str, f64)> = Vec::new();
    let m_theta = thetas[0].len();
    let n_labeled = items.iter().filter(|it| it.label.is_some()).count();
    let zeta = match (&labels, cfg.zeta) {
        (_, Some(z)) => z,
        (Some((lm, _)), None) if n_labeled > 0 => balance_weight(
            model.decoder.data_dim(),
            lm.decoder.classes,
            n_labeled as f64 / items.len() as f64,
        ),
        _ => 0.0,
    };

    // importance weights from the codes as drawn
    let (theta_weights, code_weights) = if weighted {
        let (tw, cw) = importance_weights(model, rec, items, &codes, &noise_of, &thetas, labels.as_ref(), cfg)?;
        metrics.push(("weight_sum", tw.normalized().iter().sum()));
        metrics.push(("weight_ess", tw.effective_sample_size()));
        (Some(tw), Some(cw))
    } else {
        (None, None)
    };

    // code transport
    let refined: Vec<Vec<Vec<Vec<f64>>>> = items
        .par_iter()
        .enumerate()
        .map(|(n, it)| {
            let scores: Vec<Vec<Vec<f64>>> = (0..k)
                .map(|i| {
                    (0..m)
                        .map(|j| {
                            let z = &codes[n][i][j];
                            let mut s = model.latent_prior.score(z);
                            let ts = paired_thetas(cfg.theta_averaging, j, m_theta);
                            for &t in &ts {
                                let (_, g) = model.decoder.grad_latent(&thetas[i][t], it.x, z)?;
                                add_scaled(&mut s, &g, 1.0 / ts.len() as f64);
                            }
                            if let (Some(y), Some((lm, lt))) = (it.label, labels.as_ref()) {
                                if zeta != 0.0 {
                                    let ls = paired_thetas(cfg.theta_averaging, j, lt[i].len());
                                    for &t in &ls {
                                        let (_, g, _) = lm.decoder.scores(&lt[i][t], y, z)?;
                                        add_scaled(&mut s, &g, zeta / ls.len() as f64);
                                    }
                                }
                            }
                            Ok(s)
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            let deltas = match &code_weights {
                Some(cw) => iw_direction_z(&codes[n], &cw[n], &scores, &cfg.kernel)?,
                None => vec![stein_direction(&codes[n][0], &scores[0], &cfg.kernel)?],
            };
            codes[n]
                .iter()
                .zip(&deltas)
                .map(|(c, d)| {
                    let mut set = ParticleSet::new(c.clone())?;
                    set.apply_step(d, &cfg.code_step)?;
                    Ok(set.into_particles())
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    // decoder transport against the refined codes
    if model.learn_theta {
        let scores = theta_scores(model, items, &refined, &thetas, cfg, |i, t, it, z| {
            Ok(model.decoder.grad_all(&thetas[i][t], it.x, z)?.dtheta)
        })?;
        let scores: Vec<Vec<Vec<f64>>> = scores
            .into_iter()
            .enumerate()
            .map(|(i, group)| {
                group
                    .into_iter()
                    .enumerate()
                    .map(|(t, mut s)| {
                        add_scaled(&mut s, &model.theta_prior.score(&thetas[i][t]), 1.0);
                        s
                    })
                    .collect()
            })
            .collect();
        let deltas = transport(&thetas, &scores, theta_weights.as_ref(), &cfg.kernel)?;
        let rule = StepRule::Adam(AdamConfig::with_lr(cfg.lr));
        for (set, d) in state.theta.iter_mut().zip(&deltas) {
            set.apply_step(d, &rule)?;
        }
    }

    if let Some((lm, lt)) = labels {
        if n_labeled > 0 {
            let lab_items: Vec<usize> = (0..items.len()).filter(|&n| items[n].label.is_some()).collect();
            let scores: Vec<Vec<Vec<f64>>> = (0..k)
                .map(|i| {
                    (0..lt[i].len())
                        .into_par_iter()
                        .map(|t| {
                            let mut s = lm.prior.score(&lt[i][t]);
                            let cs = paired_codes(cfg.theta_averaging, t, lt[i].len(), m);
                            for &n in &lab_items {
                                let it = &items[n];
                                let y = it.label.expect("labeled");
                                for &c in &cs {
                                    let (_, _, g) = lm.decoder.scores(&lt[i][t], y, &refined[n][i][c])?;
                                    add_scaled(&mut s, &g, it.scale / cs.len() as f64);
                                }
                            }
                            Ok(s)
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            let deltas = transport(&lt, &scores, theta_weights.as_ref(), &cfg.kernel)?;
            let rule = StepRule::Adam(AdamConfig::with_lr(cfg.label_lr));
            let sets = state.label_theta.as_mut().expect("label particles");
            for (set, d) in sets.iter_mut().zip(&deltas) {
                set.apply_step(d, &rule)?;
            }
        }
    }

    // amortisation
    let fit: Vec<FitItem> = items
        .iter()
        .enumerate()
        .flat_map(|(n, it)| {
            let nz = noise_of(n);
            (0..k).map(move |i| (n, it, i, nz))
        })
        .map(|(n, it, i, nz)| FitItem {
            x: it.x,
            noise: &nz[i],
            targets: &refined[n][i],
        })
        .collect();
    let trace = state.recognition.fit_codes(&fit, cfg.fit_steps, &cfg.fit_rule)?;
    let count = (items.len() * k * m) as f64;
    metrics.push(("fit_loss", trace.last().copied().unwrap_or(0.0) / count));
    for (name, value) in metrics {
        state.record(Some(mb), name, value);
    }

    let bank = CodeBank::new(
        items.iter().map(|it| it.id).collect(),
        refined.into_iter().map(|groups| groups.concat()).collect(),
    )?;
    state.last_codes = Some(bank);
    Ok(())
}

/// `Σ_n scale_n · mean_{paired codes} g(i, t, item, z)` for every particle `t`
/// of every group `i`.
fn theta_scores<F>(
    _model: &Model,
    items: &[Item<'_>],
    refined: &[Vec<Vec<Vec<f64>>>],
    thetas: &[&[Vec<f64>]],
    cfg: &RunConfig,
    grad: F,
) -> Result<Vec<Vec<Vec<f64>>>>
where
    F: Fn(usize, usize, &Item<'_>, &[f64]) -> Result<Vec<f64>> + Sync,
{
    let m = cfg.particles;
    (0..thetas.len())
        .map(|i| {
            let m_theta = thetas[i].len();
            (0..m_theta)
                .into_par_iter()
                .map(|t| {
                    let mut s = vec![0.0; thetas[i][t].len()];
                    let cs = paired_codes(cfg.theta_averaging, t, m_theta, m);
                    for (n, it) in items.iter().enumerate() {
                        for &c in &cs {
                            let g = grad(i, t, it, &refined[n][i][c])?;
                            add_scaled(&mut s, &g, it.scale / cs.len() as f64);
                        }
                    }
                    Ok(s)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

fn transport(
    groups: &[&[Vec<f64>]],
    scores: &[Vec<Vec<f64>>],
    weights: Option<&WeightVector>,
    kernel: &KernelPolicy,
) -> Result<Vec<Vec<Vec<f64>>>> {
    match weights {
        Some(w) => {
            let owned: Vec<Vec<Vec<f64>>> = groups.iter().map(|g| g.to_vec()).collect();
            iw_direction_theta(&owned, w, scores, kernel)
        }
        None => groups
            .iter()
            .zip(scores)
            .map(|(g, s)| stein_direction(g, s, kernel))
            .collect(),
    }
}

/// Group weights for the decoder side and per-datum weights for the codes.
/// Log-ratios pair code `j` with decoder particle `j mod M_θ`; `q(z)` comes
/// from the recognition net and `q(θ)` from a kernel density estimate over
/// the group. Fixed decoders contribute no `p(θ)/q(θ)` factor.
#[allow(clippy::too_many_arguments)]
fn importance_weights<'n>(
    model: &Model,
    rec: &RecognitionNet,
    items: &[Item<'_>],
    codes: &[Vec<Vec<Vec<f64>>>],
    noise_of: &(dyn Fn(usize) -> &'n Vec<Vec<Vec<f64>>> + Sync),
    thetas: &[&[Vec<f64>]],
    labels: Option<&(&LabelModel, Vec<&[Vec<f64>]>)>,
    cfg: &RunConfig,
) -> Result<(WeightVector, Vec<WeightVector>)> {
    let k = thetas.len();
    let m = cfg.particles;
    let theta_terms: Vec<Vec<f64>> = thetas
        .iter()
        .map(|g| {
            if !model.learn_theta {
                return Ok(vec![0.0; g.len()]);
            }
            let h = cfg.kernel.kernel_for(g)?.bandwidth();
            g.iter()
                .map(|t| Ok(model.theta_prior.log_density(t) - kde_log_density(t, g, h)?))
                .collect()
        })
        .collect::<Result<_>>()?;
    // ratios[n][i][j]
    let ratios: Vec<Vec<Vec<f64>>> = items
        .par_iter()
        .enumerate()
        .map(|(n, it)| {
            (0..k)
                .map(|i| {
                    (0..m)
                        .map(|j| {
                            let z = &codes[n][i][j];
                            let t = j % thetas[i].len();
                            let mut r = model.decoder.log_likelihood(&thetas[i][t], it.x, z)?
                                + model.latent_prior.log_density(z)
                                + theta_terms[i][t]
                                - rec.code_log_density(it.x, &noise_of(n)[i][j])?;
                            if let (Some(y), Some((lm, lt))) = (it.label, labels) {
                                let p = lm.decoder.probabilities(&lt[i][j % lt[i].len()], z)?;
                                r += p[y].ln();
                            }
                            Ok(r)
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let per_datum = ratios
        .iter()
        .map(|r| WeightVector::from_log_ratios(r, m))
        .collect::<Result<Vec<_>>>()?;
    let pooled: Vec<Vec<f64>> = (0..k)
        .map(|i| ratios.iter().flat_map(|r| r[i].iter().copied()).collect())
        .collect();
    Ok((WeightVector::from_log_ratios(&pooled, m)?, per_datum))
}

/// Class probabilities averaged over every label particle and every noise
/// draw.
pub fn predict_label(
    x: &[f64],
    label_sets: &[ParticleSet],
    decoder: &SoftmaxLabelDecoder,
    rec: &RecognitionNet,
    noise: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; decoder.classes];
    let mut count = 0usize;
    for xi in noise {
        let z = rec.draw_code(x, xi)?;
        for set in label_sets {
            for t in set.particles() {
                add_scaled(&mut acc, &decoder.probabilities(t, &z)?, 1.0);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyReduction);
    }
    acc.iter_mut().for_each(|v| *v /= count as f64);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{GaussianLinearDecoder, GmmPrior};
    use crate::nn::Activation;
    use crate::numcore::AdamState;

    fn linear_model() -> Model {
        Model {
            decoder: Arc::new(GaussianLinearDecoder::new(2, 2, 0.5).unwrap()),
            latent_prior: Arc::new(NormalPrior::standard()),
            theta_prior: Arc::new(NormalPrior::standard()),
            learn_theta: true,
            labels: None,
        }
    }

    fn toy_data(n: usize) -> Vec<Vec<f64>> {
        let mut rng = RngStream::new(77, 0);
        (0..n).map(|_| rng.sample_gaussian(2)).collect()
    }

    fn small_cfg() -> RunConfig {
        RunConfig {
            particles: 4,
            theta_particles: Some(3),
            iw_samples: 2,
            batch: 8,
            seed: 11,
            code_step: StepRule::Raw { step: 0.05 },
            fit_rule: FitRule::Adam(AdamConfig::with_lr(1e-2)),
            ..RunConfig::default()
        }
    }

    fn fresh_state(cfg: &RunConfig, k: usize) -> TrainState {
        let mut rng = RngStream::new(cfg.seed, 999);
        let theta = gaussian_groups(&mut rng, k, cfg.theta_count(), 4, 1.0).unwrap();
        let rec = RecognitionNet::random(2, 2, &[6], Activation::Tanh, &mut rng).unwrap();
        TrainState::new(theta, None, rec).unwrap()
    }

    #[test]
    fn epochs_are_deterministic() {
        let cfg = small_cfg();
        let data = toy_data(20);
        let model = linear_model();
        let mut a = fresh_state(&cfg, 1);
        let mut b = fresh_state(&cfg, 1);
        for _ in 0..2 {
            stein_vae_epoch(&mut a, &model, &data, &cfg).unwrap();
            stein_vae_epoch(&mut b, &model, &data, &cfg).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(a.epoch, 2);
        assert_eq!(a.history.len(), 2 * 3);
    }

    #[test]
    fn single_group_viwae_is_bitwise_vae() {
        let cfg = small_cfg();
        let data = toy_data(20);
        let model = linear_model();
        let mut a = fresh_state(&cfg, 1);
        let mut b = fresh_state(&cfg, 1);
        stein_vae_epoch(&mut a, &model, &data, &cfg).unwrap();
        stein_viwae_epoch(&mut b, &model, &data, &cfg).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.recognition, b.recognition);
        assert_eq!(a.last_codes, b.last_codes);
        assert!(b.history.iter().filter(|r| r.name == "weight_sum").all(|r| r.value == 1.0));
    }

    #[test]
    fn weighted_epoch_runs_and_weights_sum_to_one() {
        let cfg = RunConfig {
            method: Method::Viwae,
            ..small_cfg()
        };
        let data = toy_data(16);
        let mut s = fresh_state(&cfg, 2);
        train_epoch(&mut s, &linear_model(), &data, None, &cfg).unwrap();
        let sums: Vec<f64> = s.history.iter().filter(|r| r.name == "weight_sum").map(|r| r.value).collect();
        assert_eq!(sums.len(), 2);
        assert!(sums.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_epochs_leave_state_unchanged() {
        let cfg = RunConfig { epochs: 0, ..small_cfg() };
        let s = fresh_state(&cfg, 1);
        let t = s.clone();
        assert_eq!(s, t);
    }

    #[test]
    fn single_particle_follows_adam_on_the_score() {
        // With one decoder particle and one code the transport is the raw score,
        // so the decoder follows Adam on the minibatch estimate of ∇θ log p.
        let cfg = RunConfig {
            particles: 1,
            theta_particles: Some(1),
            batch: 5,
            shuffle: false,
            ..small_cfg()
        };
        let data = toy_data(10);
        let model = linear_model();
        let mut state = fresh_state(&cfg, 1);
        let mut theta = state.theta[0].particles()[0].clone();
        let mut rec = state.recognition.clone();
        let mut adam = AdamState::new(theta.len());
        for (mb, chunk) in data.chunks(cfg.batch).enumerate() {
            let mut rng = stream_rng(cfg.seed, StreamKind::Noise, 0, mb as u64);
            let xi = rng.sample_gaussian(2);
            let mut grad = model.theta_prior.score(&theta);
            let mut fit_targets = Vec::new();
            for x in chunk {
                let z = rec.draw_code(x, &xi).unwrap();
                let (_, gz) = model.decoder.grad_latent(&theta, x, &z).unwrap();
                let s: Vec<f64> = model.latent_prior.score(&z).iter().zip(&gz).map(|(a, b)| a + b).collect();
                let zr: Vec<f64> = z.iter().zip(&s).map(|(a, b)| a + 0.05 * b).collect();
                let g = model.decoder.grad_all(&theta, x, &zr).unwrap().dtheta;
                add_scaled(&mut grad, &g, data.len() as f64 / chunk.len() as f64);
                fit_targets.push(vec![zr]);
            }
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            adam.step(&AdamConfig::with_lr(cfg.lr), &mut theta, &neg).unwrap();
            let noise = vec![xi.clone()];
            let batch: Vec<FitItem> = chunk
                .iter()
                .zip(&fit_targets)
                .map(|(x, t)| FitItem {
                    x,
                    noise: &noise,
                    targets: t,
                })
                .collect();
            rec.fit_codes(&batch, cfg.fit_steps, &cfg.fit_rule).unwrap();
        }
        stein_vae_epoch(&mut state, &model, &data, &cfg).unwrap();
        assert_eq!(state.theta[0].particles()[0], theta);
    }

    #[test]
    fn fixed_decoder_is_not_moved() {
        let cfg = small_cfg();
        let model = Model {
            learn_theta: false,
            latent_prior: Arc::new(GmmPrior {
                mu1: vec![1.0, 1.0],
                mu2: vec![-1.0, -1.0],
            }),
            ..linear_model()
        };
        let mut s = fresh_state(&cfg, 1);
        let before = s.theta.clone();
        stein_vae_epoch(&mut s, &model, &toy_data(10), &cfg).unwrap();
        assert_eq!(s.theta, before);
    }

    #[test]
    fn zeta_and_prediction() {
        assert!((balance_weight(784, 10, 0.5) - 156.8).abs() < 1e-12);
        let dec = SoftmaxLabelDecoder { classes: 2, latent_dim: 2 };
        let rec = RecognitionNet::random(2, 2, &[], Activation::Tanh, &mut RngStream::new(1, 1)).unwrap();
        let sets = vec![ParticleSet::new(vec![vec![0.0; 4]; 3]).unwrap()];
        let p = predict_label(&[0.2, 0.1], &sets, &dec, &rec, &[vec![0.5, 0.5], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small_cfg();
        let mut s = fresh_state(&cfg, 2);
        stein_viwae_epoch(&mut s, &linear_model(), &toy_data(12), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        s.save(&path).unwrap();
        let back = TrainState::load(&path).unwrap();
        assert_eq!(back, s);
        std::fs::write(&path, "{\"format_version\": 99}").unwrap();
        assert!(TrainState::load(&path).is_err());
    }

    #[test]
    fn minibatch_errors_carry_their_index() {
        let cfg = small_cfg();
        let mut s = fresh_state(&cfg, 1);
        let mut data = toy_data(12);
        data[10] = vec![f64::NAN, 0.0];
        let err = stein_vae_epoch(&mut s, &linear_model(), &data, &RunConfig { shuffle: false, ..cfg }).unwrap_err();
        assert!(matches!(err, Error::Minibatch { index: 1, .. }), "{err}");
    }
}
