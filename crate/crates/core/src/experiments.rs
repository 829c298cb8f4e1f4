//! The desk-scale experiments behind the CLI. Each one builds synthetic
//! data, trains, evaluates against an oracle and returns a [`Report`] whose
//! checks decide the exit status.

use std::sync::Arc;

use rayon::prelude::*;

use crate::config::{Experiment, ExperimentParams, ExperimentSpec};
use crate::error::Result;
use crate::eval::{elbo_report, posterior_diagnostics};
use crate::harness::{run_all, CheckResult};
use crate::models::{
    gmm_analytic_posterior, positive, BernoulliMlpDecoder, CompletionReading, Decoder, GammaSoftplusPrior,
    GaussianLinearDecoder, GmmPrior, NormalPrior, PoissonFactorDecoder, SoftmaxLabelDecoder,
    DEFAULT_LOADING_SHAPE,
};
use crate::nn::{Activation, Mlp};
use crate::numcore::{log_sum_exp, mean, Mat, RngStream};
use crate::recognition::RecognitionNet;
use crate::svgd::ParticleSet;
use crate::trainer::{
    gaussian_groups, predict_label, train_epoch, Labeled, LabelModel, Method, Model, RunConfig, TrainState,
};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: u64,
    pub minibatch: Option<u64>,
    pub name: String,
    pub value: f64,
    pub seed: u64,
}

/// One code sample of one datum.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub datum_id: usize,
    pub sample_id: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub metrics: Vec<MetricRow>,
    pub samples: Vec<SampleRow>,
    pub checks: Vec<CheckResult>,
    /// Final values for the summary file.
    pub summary: Vec<(String, f64)>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn metric(&mut self, epoch: u64, name: impl Into<String>, value: f64, seed: u64) {
        self.metrics.push(MetricRow {
            epoch,
            minibatch: None,
            name: name.into(),
            value,
            seed,
        });
    }

    fn history(&mut self, state: &TrainState, seed: u64, prefix: &str) {
        self.metrics.extend(state.history.iter().map(|r| MetricRow {
            epoch: r.epoch,
            minibatch: r.minibatch,
            name: format!("{prefix}{}", r.name),
            value: r.value,
            seed,
        }));
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<Report> {
    spec.run.validate()?;
    match spec.experiment {
        Experiment::Gmm => gmm(spec),
        Experiment::Pfa => pfa(spec),
        Experiment::DensityToy => density_toy(spec),
        Experiment::SemisupToy => semisup_toy(spec),
        Experiment::Check => Ok(Report {
            checks: run_all(spec.run.seed),
            ..Report::default()
        }),
    }
}

// Streams for data and evaluation noise; the trainer's streams use tags 1..=3
// in the top byte.
const DATA: u64 = 0x10 << 56;
const TEST_DATA: u64 = 0x11 << 56;
const INIT: u64 = 0x12 << 56;
const EVAL_NOISE: u64 = 0x13 << 56;
const ORACLE: u64 = 0x14 << 56;
const TRUTH: u64 = 0x15 << 56;
const BOUNDARY_DATA: u64 = 0x16 << 56;

fn noise_block(rng: &mut RngStream, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| rng.sample_gaussian(dim)).collect()
}

fn train(
    state: &mut TrainState,
    model: &Model,
    data: &[Vec<f64>],
    labeled: Option<Labeled<'_>>,
    cfg: &RunConfig,
    mut after_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    for _ in 0..cfg.epochs {
        train_epoch(state, model, data, labeled, cfg)?;
        let e = state.epoch;
        let fit: Vec<f64> = state
            .history
            .iter()
            .filter(|r| r.epoch + 1 == e && r.minibatch.is_some() && r.name == "fit_loss")
            .map(|r| r.value)
            .collect();
        if !fit.is_empty() {
            state.history.push(crate::trainer::MetricRecord {
                epoch: e - 1,
                minibatch: None,
                name: "mean_fit_loss".into(),
                value: mean(&fit),
            });
        }
        after_epoch(state)?;
    }
    Ok(())
}

fn save_checkpoint(state: &TrainState, params: &ExperimentParams) -> Result<()> {
    match &params.checkpoint {
        Some(path) => state.save(path),
        None => Ok(()),
    }
}

fn initial_state(
    spec: &ExperimentSpec,
    seed: u64,
    truth: Option<&[f64]>,
    param_dim: usize,
    data_dim: usize,
    latent_dim: usize,
    label_dim: Option<usize>,
) -> Result<TrainState> {
    let run = &spec.run;
    let p = &spec.params;
    let k = run.groups();
    let mut rng = RngStream::new(seed, INIT);
    let theta = match truth {
        Some(t) => (0..k).map(|_| ParticleSet::new(vec![t.to_vec()])).collect::<Result<_>>()?,
        None => gaussian_groups(&mut rng, k, run.theta_count(), param_dim, 0.1)?,
    };
    let label_theta = match label_dim {
        Some(d) => Some(gaussian_groups(&mut rng, k, run.theta_count(), d, 0.1)?),
        None => None,
    };
    let rec = RecognitionNet::random(data_dim, latent_dim, &[p.hidden], p.activation, &mut rng)?;
    TrainState::new(theta, label_theta, rec)
}

const GMM_THETA: [f64; 4] = [2.0, -1.0, 1.0, -2.0];
const GMM_SIGMA: f64 = 0.1;
const GMM_MU1: [f64; 2] = [5.0, 5.0];
const GMM_MU2: [f64; 2] = [-5.0, -5.0];
/// Analytic weight band in which both modes must receive samples.
const GMM_BIMODAL: (f64, f64) = (0.2, 0.8);
/// Share of the samples each mode needs to count as populated.
const GMM_MIN_MODE_SHARE: f64 = 0.05;
const GMM_WEIGHT_TOL: f64 = 0.15;
const GMM_MEAN_TOL: f64 = 0.5;

fn gmm_draw(rng: &mut RngStream, theta: &Mat) -> Result<(Vec<f64>, Vec<f64>)> {
    let mu = if rng.uniform() < 0.5 { GMM_MU1 } else { GMM_MU2 };
    let z: Vec<f64> = mu.iter().map(|m| m + rng.gaussian()).collect();
    let x = gmm_observe(rng, theta, &z)?;
    Ok((z, x))
}

fn gmm_observe(rng: &mut RngStream, theta: &Mat, z: &[f64]) -> Result<Vec<f64>> {
    Ok(theta
        .matvec(z)?
        .into_iter()
        .map(|m| m + GMM_SIGMA * rng.gaussian())
        .collect())
}

/// Test inputs drawn from the model.
pub fn gmm_test_points(seed: u64, n: usize) -> Result<Vec<Vec<f64>>> {
    let theta = Mat::from_vec(2, 2, GMM_THETA.to_vec())?;
    let mut rng = RngStream::new(seed, TEST_DATA);
    (0..n).map(|_| gmm_draw(&mut rng, &theta).map(|(_, x)| x)).collect()
}

/// Inputs whose analytic mode weight lies in `[0.25, 0.75]`, found by
/// sampling latents near the line `z1 + z2 = 0`. The model itself almost
/// never produces such data.
pub fn gmm_boundary_points(seed: u64, n: usize) -> Result<Vec<Vec<f64>>> {
    let theta = Mat::from_vec(2, 2, GMM_THETA.to_vec())?;
    let mut rng = RngStream::new(seed, BOUNDARY_DATA);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let a = rng.gaussian();
        let c = 0.1 * (2.0 * rng.uniform() - 1.0);
        let x = gmm_observe(&mut rng, &theta, &[a + c, -a + c])?;
        let post = gmm_analytic_posterior(&x, &theta, GMM_SIGMA, &GMM_MU1, &GMM_MU2, CompletionReading::Completed)?;
        if (0.25..=0.75).contains(&post.weight) {
            out.push(x);
        }
    }
    Ok(out)
}

fn gmm(spec: &ExperimentSpec) -> Result<Report> {
    let (run, p) = (&spec.run, &spec.params);
    let seed = run.seed;
    let theta = Mat::from_vec(2, 2, GMM_THETA.to_vec())?;
    let mut rng = RngStream::new(seed, DATA);
    let data: Vec<Vec<f64>> = (0..p.train_size)
        .map(|_| gmm_draw(&mut rng, &theta).map(|(_, x)| x))
        .collect::<Result<_>>()?;
    let decoder = GaussianLinearDecoder::new(2, 2, GMM_SIGMA)?;
    let model = Model {
        decoder: Arc::new(decoder),
        latent_prior: Arc::new(GmmPrior {
            mu1: GMM_MU1.to_vec(),
            mu2: GMM_MU2.to_vec(),
        }),
        theta_prior: Arc::new(NormalPrior::standard()),
        learn_theta: p.learn_theta,
        labels: None,
    };
    let truth = (!p.learn_theta).then_some(&GMM_THETA[..]);
    let mut state = initial_state(spec, seed, truth, 4, 2, 2, None)?;
    train(&mut state, &model, &data, None, run, |_| Ok(()))?;
    save_checkpoint(&state, p)?;

    let mut report = Report::default();
    report.history(&state, seed, "");
    let epoch = state.epoch;
    let mut noise_rng = RngStream::new(seed, EVAL_NOISE);
    let noise = noise_block(&mut noise_rng, run.particles, 2);
    let tests = gmm_test_points(seed, p.test_size)?;
    let boundary = gmm_boundary_points(seed, p.boundary_points)?;
    let mut worst_weight: f64 = 0.0;
    for (i, x) in tests.iter().chain(&boundary).enumerate() {
        let checked = i < tests.len();
        let post = gmm_analytic_posterior(x, &theta, GMM_SIGMA, &GMM_MU1, &GMM_MU2, CompletionReading::Completed)?;
        let codes = state.recognition.draw_codes(x, &noise)?;
        let diag = posterior_diagnostics(&codes, &post, p.mode_rule)?;
        for (j, z) in codes.iter().enumerate() {
            report.samples.push(SampleRow {
                datum_id: i,
                sample_id: j,
                values: z.clone(),
            });
        }
        let prefix = if checked {
            format!("gmm.test{i}")
        } else {
            format!("gmm.boundary{}", i - tests.len())
        };
        let name = |s: &str| format!("{prefix}.{s}");
        report.metric(epoch, name("analytic_weight"), post.weight, seed);
        report.metric(epoch, name("mode_weight"), diag.mode_weight, seed);
        for m in 0..2 {
            report.metric(epoch, name(&format!("mode_mass{}", m + 1)), diag.mode_mass[m], seed);
            if let Some(e) = diag.mean_errors[m] {
                report.metric(epoch, name(&format!("mean_error{}", m + 1)), e, seed);
            }
        }
        let err = (diag.mode_weight - post.weight).abs();
        if !checked {
            report.summary.push((name("weight_error"), err));
            continue;
        }
        worst_weight = worst_weight.max(err);
        report.checks.push(CheckResult::new(
            name("mode_weight"),
            diag.mode_weight,
            post.weight,
            GMM_WEIGHT_TOL,
            err <= GMM_WEIGHT_TOL,
        ));
        let analytic = [post.weight, 1.0 - post.weight];
        if (GMM_BIMODAL.0..=GMM_BIMODAL.1).contains(&post.weight) {
            let need = GMM_MIN_MODE_SHARE * codes.len() as f64;
            let least = diag.mode_mass[0].min(diag.mode_mass[1]);
            report
                .checks
                .push(CheckResult::new(name("both_modes"), least, need, 0.0, least >= need));
        }
        for m in 0..2 {
            if analytic[m] >= GMM_BIMODAL.0 {
                let e = diag.mean_errors[m].unwrap_or(f64::INFINITY);
                report.checks.push(CheckResult::new(
                    name(&format!("mean{}", m + 1)),
                    e,
                    0.0,
                    GMM_MEAN_TOL,
                    e <= GMM_MEAN_TOL,
                ));
            }
        }
    }
    report.summary.push(("gmm.worst_weight_error".into(), worst_weight));
    Ok(report)
}

/// A Bernoulli generator `2 → hidden → 64` with weights drawn from `rng`
/// and scaled up so that the images are far from uniform noise.
fn bernoulli_generator(rng: &mut RngStream, hidden: usize, gain: f64) -> Result<Mlp> {
    let mut net = Mlp::random(&[2, hidden, 64], &[Activation::Tanh, Activation::Identity], rng)?;
    let scaled: Vec<f64> = net.params().iter().map(|v| v * gain).collect();
    net.set_params(&scaled)?;
    Ok(net)
}

fn bernoulli_data(rng: &mut RngStream, dec: &BernoulliMlpDecoder, truth: &[f64], latents: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    latents.iter().map(|z| dec.sample(truth, z, rng)).collect()
}

/// Combined standard error of a difference of two means of per-datum
/// estimates.
fn combined_se(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let sa: f64 = a.iter().map(|s| s * s).sum::<f64>().sqrt() / n;
    let sb: f64 = b.iter().map(|s| s * s).sum::<f64>().sqrt() / n;
    (sa * sa + sb * sb).sqrt()
}

/// Allowed consecutive decreases of the held-out ELBO.
const MAX_CONSECUTIVE_DROPS: usize = 2;

/// True when no run of decreases is longer than `MAX_CONSECUTIVE_DROPS` and
/// the last value exceeds the first.
pub fn nearly_increasing(values: &[f64]) -> bool {
    let mut run = 0;
    for w in values.windows(2) {
        if w[1] > w[0] {
            run = 0;
        } else {
            run += 1;
            if run > MAX_CONSECUTIVE_DROPS {
                return false;
            }
        }
    }
    values.len() < 2 || values[values.len() - 1] > values[0]
}

fn density_toy(spec: &ExperimentSpec) -> Result<Report> {
    let (run, p) = (&spec.run, &spec.params);
    let seed = run.seed;
    let mut rng = RngStream::new(seed, TRUTH);
    let true_net = bernoulli_generator(&mut rng, p.hidden, 3.0)?;
    let truth = true_net.params().to_vec();
    let true_dec = BernoulliMlpDecoder::new(true_net)?;
    let mut data_rng = RngStream::new(seed, DATA);
    let z_train = noise_block(&mut data_rng, p.train_size, 2);
    let data = bernoulli_data(&mut data_rng, &true_dec, &truth, &z_train)?;
    let mut test_rng = RngStream::new(seed, TEST_DATA);
    let z_test = noise_block(&mut test_rng, p.test_size, 2);
    let tests = bernoulli_data(&mut test_rng, &true_dec, &truth, &z_test)?;

    let shape = Mlp::random(&[2, p.hidden, 64], &[p.activation, Activation::Identity], &mut rng)?;
    let decoder = Arc::new(BernoulliMlpDecoder::new(shape)?);
    let model = Model {
        decoder: decoder.clone(),
        latent_prior: Arc::new(NormalPrior::standard()),
        theta_prior: Arc::new(NormalPrior::standard()),
        learn_theta: true,
        labels: None,
    };
    let mut state = initial_state(spec, seed, None, decoder.param_dim(), 64, 2, None)?;
    // fixed held-out noise so that successive epochs are compared on the
    // same draws
    let noise = noise_block(&mut RngStream::new(seed, EVAL_NOISE), p.eval_samples, 2);
    let prior = NormalPrior::standard();
    let heldout = |state: &TrainState| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let thetas: Vec<Vec<f64>> = state.theta.iter().flat_map(|s| s.particles().to_vec()).collect();
        let reps: Vec<_> = tests
            .par_iter()
            .map(|x| {
                elbo_report(
                    x,
                    &thetas,
                    decoder.as_ref(),
                    &prior,
                    &state.recognition,
                    &noise,
                    p.eval_k,
                    p.joint_reading,
                )
            })
            .collect::<Result<_>>()?;
        Ok((
            reps.iter().map(|r| r.elbo).collect(),
            reps.iter().map(|r| r.elbo_se).collect(),
            reps.iter().map(|r| r.s_elbo).collect(),
            reps.iter().map(|r| r.s_elbo_se).collect(),
        ))
    };
    let mut report = Report::default();
    let mut curve = Vec::new();
    let (e0, ..) = heldout(&state)?;
    curve.push(mean(&e0));
    report.metric(0, "heldout_elbo", curve[0], seed);
    let mut last = None;
    train(&mut state, &model, &data, None, run, |s| {
        let r = heldout(s)?;
        let m = mean(&r.0);
        curve.push(m);
        report.metric(s.epoch, "heldout_elbo", m, seed);
        report.metric(s.epoch, "heldout_s_elbo", mean(&r.2), seed);
        last = Some(r);
        Ok(())
    })?;
    save_checkpoint(&state, p)?;
    report.history(&state, seed, "");
    let watched = &curve[..curve.len().min(21)];
    report.checks.push(CheckResult::new(
        "density.elbo_increasing",
        watched[watched.len() - 1] - watched[0],
        0.0,
        MAX_CONSECUTIVE_DROPS as f64,
        nearly_increasing(watched),
    ));
    if let Some((elbo, elbo_se, s_elbo, s_se)) = last {
        let (me, ms) = (mean(&elbo), mean(&s_elbo));
        let se = combined_se(&elbo_se, &s_se);
        report.checks.push(CheckResult::new(
            "density.s_elbo_tightness",
            ms,
            me,
            2.0 * se,
            ms >= me - 2.0 * se,
        ));
        report.summary.push(("density.final_elbo".into(), me));
        report.summary.push(("density.final_s_elbo".into(), ms));
    }
    // a few code samples per held-out datum
    for (i, x) in tests.iter().take(5).enumerate() {
        for (j, z) in state.recognition.draw_codes(x, &noise[..noise.len().min(100)])?.into_iter().enumerate() {
            report.samples.push(SampleRow {
                datum_id: i,
                sample_id: j,
                values: z,
            });
        }
    }
    Ok(report)
}

/// Latent class centres of the semi-supervised toy.
const SEMISUP_CENTRES: [[f64; 2]; 2] = [[-2.5, 0.0], [2.5, 0.0]];
const SEMISUP_ACCURACY: f64 = 0.9;

fn semisup_run(spec: &ExperimentSpec, seed: u64, method: Method) -> Result<(f64, TrainState)> {
    let p = &spec.params;
    let run = RunConfig {
        seed,
        method,
        ..spec.run.clone()
    };
    let mut rng = RngStream::new(seed, TRUTH);
    let true_net = bernoulli_generator(&mut rng, p.hidden, 2.0)?;
    let truth = true_net.params().to_vec();
    let decoder = Arc::new(BernoulliMlpDecoder::new(true_net)?);
    let draw = |rng: &mut RngStream, n: usize, class: usize| -> Result<Vec<Vec<f64>>> {
        (0..n)
            .map(|_| {
                let z: Vec<f64> = SEMISUP_CENTRES[class].iter().map(|c| c + rng.gaussian()).collect();
                decoder.sample(&truth, &z, rng)
            })
            .collect()
    };
    let mut data_rng = RngStream::new(seed, DATA);
    let mut unlabeled = Vec::new();
    for c in 0..2 {
        unlabeled.extend(draw(&mut data_rng, p.unlabeled / 2 + c * (p.unlabeled % 2), c)?);
    }
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    for c in 0..2 {
        lx.extend(draw(&mut data_rng, p.labeled_per_class, c)?);
        ly.extend(std::iter::repeat_n(c, p.labeled_per_class));
    }
    let mut test_rng = RngStream::new(seed, TEST_DATA);
    let mut tx = Vec::new();
    let mut ty = Vec::new();
    for c in 0..2 {
        tx.extend(draw(&mut test_rng, p.test_size, c)?);
        ty.extend(std::iter::repeat_n(c, p.test_size));
    }
    let label_dec = SoftmaxLabelDecoder { classes: 2, latent_dim: 2 };
    let model = Model {
        decoder: decoder.clone(),
        latent_prior: Arc::new(NormalPrior { scale: 3.0 }),
        theta_prior: Arc::new(NormalPrior::standard()),
        learn_theta: false,
        labels: Some(LabelModel {
            decoder: label_dec,
            prior: NormalPrior::standard(),
        }),
    };
    let spec_run = ExperimentSpec {
        run: run.clone(),
        ..spec.clone()
    };
    let mut state = initial_state(&spec_run, seed, Some(&truth), truth.len(), 64, 2, Some(label_dec.param_dim()))?;
    let labeled = Labeled { x: &lx, y: &ly };
    train(&mut state, &model, &unlabeled, Some(labeled), &run, |_| Ok(()))?;
    let noise = noise_block(&mut RngStream::new(seed, EVAL_NOISE), p.eval_samples, 2);
    let sets = state.label_theta.clone().expect("label particles");
    let correct: Vec<f64> = tx
        .par_iter()
        .zip(&ty)
        .map(|(x, &y)| {
            let probs = predict_label(x, &sets, &label_dec, &state.recognition, &noise)?;
            let best = if probs[1] > probs[0] { 1 } else { 0 };
            Ok(if best == y { 1.0 } else { 0.0 })
        })
        .collect::<Result<_>>()?;
    Ok((mean(&correct), state))
}

fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

fn semisup_toy(spec: &ExperimentSpec) -> Result<Report> {
    let p = &spec.params;
    let mut report = Report::default();
    let mut acc = [Vec::new(), Vec::new()];
    for (mi, method) in [Method::Vae, Method::Viwae].into_iter().enumerate() {
        for s in 0..p.seeds as u64 {
            let seed = spec.run.seed + s;
            let (a, state) = semisup_run(spec, seed, method)?;
            let tag = method.as_str();
            report.history(&state, seed, &format!("{tag}."));
            report.metric(state.epoch, format!("{tag}.accuracy"), a, seed);
            report.checks.push(CheckResult::new(
                format!("semisup.{tag}.seed{seed}.accuracy"),
                a,
                SEMISUP_ACCURACY,
                0.0,
                a >= SEMISUP_ACCURACY,
            ));
            if mi == 0 && s == 0 {
                save_checkpoint(&state, p)?;
            }
            acc[mi].push(a);
        }
    }
    for (mi, tag) in ["vae", "viwae"].into_iter().enumerate() {
        report.summary.push((format!("semisup.{tag}.mean_accuracy"), mean(&acc[mi])));
        report
            .summary
            .push((format!("semisup.{tag}.accuracy_variance"), sample_variance(&acc[mi])));
    }
    Ok(report)
}

const PFA_DIM: usize = 5;
const PFA_FACTORS: usize = 2;
/// Gamma prior on the factor scores.
pub const PFA_SCORE_PRIOR: GammaSoftplusPrior = GammaSoftplusPrior { shape: 2.0, rate: 1.0 };
const PFA_REL_TOL: f64 = 0.2;

/// Inverse of [`positive`].
fn unconstrain(v: f64) -> f64 {
    let y = v - crate::models::RATE_FLOOR;
    y + (-(-y).exp_m1()).ln()
}

/// Self-normalised importance-sampling posterior mean of the constrained
/// scores, with proposals from the prior.
pub fn pfa_oracle_mean(x: &[f64], loadings: &[f64], proposals: usize, seed: u64, datum: u64) -> Vec<f64> {
    const CHUNK: usize = 10_000;
    let chunks = proposals.div_ceil(CHUNK);
    let parts: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = RngStream::new(seed, ORACLE | (datum << 32) | c as u64);
            let n = CHUNK.min(proposals - c * CHUNK);
            let mut lw = Vec::with_capacity(n);
            let mut zs = Vec::with_capacity(n);
            for _ in 0..n {
                let z: Vec<f64> = (0..PFA_FACTORS)
                    .map(|_| rng.gamma(PFA_SCORE_PRIOR.shape, PFA_SCORE_PRIOR.rate))
                    .collect();
                let mut l = 0.0;
                for p in 0..PFA_DIM {
                    let r: f64 = (0..PFA_FACTORS).map(|v| loadings[p * PFA_FACTORS + v] * z[v]).sum();
                    l += x[p] * r.ln() - r;
                }
                lw.push(l);
                zs.push(z);
            }
            (lw, zs)
        })
        .collect();
    let all: Vec<f64> = parts.iter().flat_map(|(l, _)| l.iter().copied()).collect();
    let lse = log_sum_exp(&all).expect("non-empty");
    let mut m = vec![0.0; PFA_FACTORS];
    for (lw, zs) in &parts {
        for (l, z) in lw.iter().zip(zs) {
            let w = (l - lse).exp();
            m.iter_mut().zip(z).for_each(|(a, b)| *a += w * b);
        }
    }
    m
}

fn pfa(spec: &ExperimentSpec) -> Result<Report> {
    let (run, p) = (&spec.run, &spec.params);
    let seed = run.seed;
    let mut rng = RngStream::new(seed, TRUTH);
    let loadings: Vec<f64> = (0..PFA_DIM * PFA_FACTORS)
        .map(|_| rng.gamma(DEFAULT_LOADING_SHAPE, 1.0) + 0.5)
        .collect();
    let truth: Vec<f64> = loadings.iter().map(|&v| unconstrain(v)).collect();
    let decoder = Arc::new(PoissonFactorDecoder {
        data_dim: PFA_DIM,
        factors: PFA_FACTORS,
    });
    let draw = |rng: &mut RngStream, n: usize| -> Result<Vec<Vec<f64>>> {
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..PFA_FACTORS)
                    .map(|_| unconstrain(rng.gamma(PFA_SCORE_PRIOR.shape, PFA_SCORE_PRIOR.rate)))
                    .collect();
                decoder.sample(&truth, &z, rng)
            })
            .collect()
    };
    let data = draw(&mut RngStream::new(seed, DATA), p.train_size)?;
    let tests = draw(&mut RngStream::new(seed, TEST_DATA), p.test_size)?;
    let model = Model {
        decoder: decoder.clone(),
        latent_prior: Arc::new(PFA_SCORE_PRIOR),
        theta_prior: Arc::new(GammaSoftplusPrior {
            shape: DEFAULT_LOADING_SHAPE,
            rate: 1.0,
        }),
        learn_theta: p.learn_theta,
        labels: None,
    };
    let init = (!p.learn_theta).then_some(&truth[..]);
    let mut state = initial_state(spec, seed, init, truth.len(), PFA_DIM, PFA_FACTORS, None)?;
    train(&mut state, &model, &data, None, run, |_| Ok(()))?;
    save_checkpoint(&state, p)?;
    let mut report = Report::default();
    report.history(&state, seed, "");
    let noise = noise_block(&mut RngStream::new(seed, EVAL_NOISE), p.eval_samples, PFA_FACTORS);
    let mut worst: f64 = 0.0;
    for (i, x) in tests.iter().enumerate() {
        let codes = state.recognition.draw_codes(x, &noise)?;
        let mut m = vec![0.0; PFA_FACTORS];
        for c in &codes {
            m.iter_mut().zip(c).for_each(|(a, u)| *a += positive(*u) / codes.len() as f64);
        }
        let oracle = pfa_oracle_mean(x, &loadings, p.proposals, seed, i as u64);
        let diff: f64 = m.iter().zip(&oracle).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm: f64 = oracle.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = diff / norm;
        worst = worst.max(rel);
        report.metric(state.epoch, format!("pfa.test{i}.relative_error"), rel, seed);
        report.checks.push(CheckResult::new(
            format!("pfa.test{i}.posterior_mean"),
            rel,
            0.0,
            PFA_REL_TOL,
            rel < PFA_REL_TOL,
        ));
        for (j, c) in codes.iter().take(100).enumerate() {
            report.samples.push(SampleRow {
                datum_id: i,
                sample_id: j,
                values: c.iter().map(|&u| positive(u)).collect(),
            });
        }
    }
    report.summary.push(("pfa.worst_relative_error".into(), worst));
    Ok(report)
}

/// Checks in the report that failed, formatted one per line.
pub fn failures(report: &Report) -> Vec<String> {
    report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}: value {} reference {} tolerance {}", c.name, c.value, c.reference, c.tolerance))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrain_inverts_positive() {
        for v in [1e-3, 0.5, 2.0, 30.0] {
            assert!((positive(unconstrain(v)) - v).abs() < 1e-10 * v.max(1.0));
        }
    }

    #[test]
    fn nearly_increasing_rule() {
        assert!(nearly_increasing(&[0.0, 1.0, 0.5, 0.4, 2.0]));
        assert!(!nearly_increasing(&[0.0, 1.0, 0.9, 0.8, 0.7, 2.0]));
        assert!(!nearly_increasing(&[1.0, 2.0, 0.5]));
    }

    #[test]
    fn boundary_points_are_ambiguous() {
        let theta = Mat::from_vec(2, 2, GMM_THETA.to_vec()).unwrap();
        let pts = gmm_boundary_points(3, 6).unwrap();
        assert_eq!(pts.len(), 6);
        for x in &pts {
            let w = gmm_analytic_posterior(x, &theta, GMM_SIGMA, &GMM_MU1, &GMM_MU2, CompletionReading::Completed)
                .unwrap()
                .weight;
            assert!((0.25..=0.75).contains(&w), "{w}");
        }
        // model draws are essentially never ambiguous
        for x in gmm_test_points(3, 200).unwrap() {
            let w = gmm_analytic_posterior(&x, &theta, GMM_SIGMA, &GMM_MU1, &GMM_MU2, CompletionReading::Completed)
                .unwrap()
                .weight;
            assert!(!(1e-6..=1.0 - 1e-6).contains(&w), "{w}");
        }
    }

    #[test]
    fn oracle_matches_conjugate_limit() {
        // with one factor effectively switched off the posterior of the other
        // is Gamma(2 + Σx, 1 + Σ loadings)
        let loadings = [1.0, 1e-12, 2.0, 1e-12, 0.5, 1e-12, 1.5, 1e-12, 1.0, 1e-12];
        let x = [2.0, 4.0, 1.0, 3.0, 2.0];
        let m = pfa_oracle_mean(&x, &loadings, 200_000, 5, 0);
        let expect = (2.0 + 12.0) / (1.0 + 6.0);
        assert!((m[0] - expect).abs() < 0.02, "{} vs {expect}", m[0]);
    }
}
