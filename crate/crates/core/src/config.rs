//! Experiment specifications and the line-oriented `key = value` format.
//!
//! A spec starts from the defaults of its experiment, then file values are
//! applied, then command-line values. [`ExperimentSpec::echo`] writes every
//! key, so the echo re-parses to the same spec.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::eval::{JointReading, ModeRule};
use crate::kernels::BandwidthMode;
use crate::nn::Activation;
use crate::numcore::AdamConfig;
use crate::recognition::FitRule;
use crate::svgd::StepRule;
use crate::trainer::{Method, RunConfig, ThetaAveraging};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Gmm,
    Pfa,
    DensityToy,
    SemisupToy,
    Check,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Gmm,
        Experiment::Pfa,
        Experiment::DensityToy,
        Experiment::SemisupToy,
        Experiment::Check,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Experiment::Gmm => "gmm",
            Experiment::Pfa => "pfa",
            Experiment::DensityToy => "density-toy",
            Experiment::SemisupToy => "semisup-toy",
            Experiment::Check => "check",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Experiment::ALL.into_iter().find(|e| e.as_str() == s)
    }
}

/// Settings that belong to the experiments rather than to the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentParams {
    pub train_size: usize,
    pub test_size: usize,
    /// Extra mixture inputs near the boundary between the two components,
    /// reported but not checked.
    pub boundary_points: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub learn_theta: bool,
    /// Recognition draws per held-out datum.
    pub eval_samples: usize,
    pub eval_k: usize,
    pub mode_rule: ModeRule,
    pub joint_reading: JointReading,
    pub labeled_per_class: usize,
    pub unlabeled: usize,
    pub seeds: usize,
    pub proposals: usize,
    pub checkpoint: Option<PathBuf>,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        ExperimentParams {
            train_size: 1000,
            test_size: 10,
            boundary_points: 0,
            hidden: 100,
            activation: Activation::Tanh,
            learn_theta: true,
            eval_samples: 1000,
            eval_k: 50,
            mode_rule: ModeRule::MaxLikelihood,
            joint_reading: JointReading::MeanLog,
            labeled_per_class: 10,
            unlabeled: 500,
            seeds: 5,
            proposals: 1_000_000,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub run: RunConfig,
    pub params: ExperimentParams,
    pub out: PathBuf,
}

impl ExperimentSpec {
    /// Global defaults with nothing experiment-specific applied.
    pub fn base(experiment: Experiment) -> Self {
        ExperimentSpec {
            experiment,
            run: RunConfig::default(),
            params: ExperimentParams::default(),
            out: PathBuf::from("out"),
        }
    }

    /// Defaults tuned for each experiment. Particle counts, `k`, minibatch
    /// size and the decoder learning rate keep their global values.
    pub fn defaults(experiment: Experiment) -> Self {
        let mut s = ExperimentSpec::base(experiment);
        let (run, p) = (&mut s.run, &mut s.params);
        match experiment {
            Experiment::Gmm => {
                p.train_size = 2000;
                p.test_size = 10;
                p.boundary_points = 4;
                p.hidden = 100;
                p.learn_theta = false;
                p.activation = Activation::leaky_relu();
                // the two analytic modes sit 1.4 sd apart, so the code map has
                // to be accurate to ~0.01 along (1, 1); a step near the
                // stability limit of the stiff direction and a slow fit get there
                run.epochs = 120;
                run.code_step = StepRule::Raw { step: 1.8e-3 };
                run.fit_rule = FitRule::Adam(AdamConfig::with_lr(3e-4));
            }
            Experiment::Pfa => {
                p.train_size = 500;
                p.test_size = 10;
                p.hidden = 50;
                p.learn_theta = false;
                run.epochs = 150;
                run.code_step = StepRule::Raw { step: 5e-2 };
                run.fit_rule = FitRule::Adam(AdamConfig::with_lr(1e-3));
            }
            Experiment::DensityToy => {
                p.train_size = 1000;
                p.test_size = 100;
                p.hidden = 50;
                p.learn_theta = true;
                p.eval_samples = 1000;
                run.epochs = 20;
                run.theta_particles = Some(10);
                run.theta_averaging = ThetaAveraging::Paired;
                run.code_step = StepRule::Raw { step: 1e-2 };
                run.fit_rule = FitRule::Adam(AdamConfig::with_lr(1e-3));
            }
            Experiment::SemisupToy => {
                // ten training runs share one time budget
                run.particles = 20;
                p.test_size = 100;
                p.hidden = 50;
                p.learn_theta = false;
                p.eval_samples = 100;
                run.epochs = 20;
                run.iw_samples = 5;
                run.labeled_batch = Some(4);
                run.code_step = StepRule::Raw { step: 1e-2 };
                run.fit_rule = FitRule::Adam(AdamConfig::with_lr(1e-3));
                run.label_lr = 1e-2;
            }
            Experiment::Check => {}
        }
        s
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                key: line.to_string(),
                message: "expected `key = value`".into(),
            })?;
            self.set_at(i + 1, key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies one `KEY=VALUE` given on the command line.
    pub fn apply_flag(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| Error::Config {
            line: 0,
            key: assignment.to_string(),
            message: "expected KEY=VALUE".into(),
        })?;
        self.set_at(0, key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_at(0, key, value)
    }

    fn set_at(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        self.assign(key, value).map_err(|message| Error::Config {
            line,
            key: key.to_string(),
            message,
        })
    }

    fn assign(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (run, p) = (&mut self.run, &mut self.params);
        match key {
            "experiment" => {
                self.experiment = Experiment::parse(v).ok_or_else(|| format!("unknown experiment `{v}`"))?
            }
            "out" => self.out = PathBuf::from(non_empty(v)?),
            "seed" => run.seed = num(v)?,
            "particles" => run.particles = positive(v)?,
            "theta_particles" => run.theta_particles = auto(v, positive)?,
            "iw_samples" => run.iw_samples = positive(v)?,
            "method" => run.method = Method::parse(v).ok_or_else(|| choices(v, "vae, viwae"))?,
            "batch" => run.batch = positive(v)?,
            "labeled_batch" => run.labeled_batch = auto(v, positive)?,
            "epochs" => run.epochs = num(v)?,
            "lr" => run.lr = positive_float(v)?,
            "label_lr" => run.label_lr = positive_float(v)?,
            "code_step" => {
                let lr = step_lr(&run.code_step);
                run.code_step = match v {
                    "raw" => StepRule::Raw { step: lr },
                    "adam" => StepRule::Adam(AdamConfig::with_lr(lr)),
                    _ => return Err(choices(v, "raw, adam")),
                }
            }
            "code_lr" => {
                let lr = positive_float(v)?;
                run.code_step = match run.code_step {
                    StepRule::Raw { .. } => StepRule::Raw { step: lr },
                    StepRule::Adam(_) => StepRule::Adam(AdamConfig::with_lr(lr)),
                }
            }
            "fit_rule" => {
                let lr = fit_lr(&run.fit_rule);
                run.fit_rule = match v {
                    "gd" => FitRule::Gradient { lr },
                    "adam" => FitRule::Adam(AdamConfig::with_lr(lr)),
                    _ => return Err(choices(v, "gd, adam")),
                }
            }
            "fit_lr" => {
                let lr = positive_float(v)?;
                run.fit_rule = match run.fit_rule {
                    FitRule::Gradient { .. } => FitRule::Gradient { lr },
                    FitRule::Adam(_) => FitRule::Adam(AdamConfig::with_lr(lr)),
                }
            }
            "fit_steps" => run.fit_steps = positive(v)?,
            "zeta" => run.zeta = auto(v, float)?,
            "bandwidth_mode" => {
                run.kernel.mode = BandwidthMode::parse(v).ok_or_else(|| choices(v, "squared, unsquared"))?
            }
            "bandwidth" => {
                run.kernel.fixed_bandwidth = if v == "median" { None } else { Some(positive_float(v)?) }
            }
            "shared_noise" => run.shared_noise = boolean(v)?,
            "theta_averaging" => {
                run.theta_averaging = ThetaAveraging::parse(v).ok_or_else(|| choices(v, "all, paired"))?
            }
            "shuffle" => run.shuffle = boolean(v)?,
            "train_size" => p.train_size = positive(v)?,
            "test_size" => p.test_size = positive(v)?,
            "boundary_points" => p.boundary_points = num(v)?,
            "hidden" => p.hidden = positive(v)?,
            "activation" => {
                p.activation = match v {
                    "tanh" => Activation::Tanh,
                    "softplus" => Activation::Softplus,
                    "leaky-relu" => Activation::leaky_relu(),
                    _ => return Err(choices(v, "tanh, softplus, leaky-relu")),
                }
            }
            "learn_theta" => p.learn_theta = boolean(v)?,
            "eval_samples" => p.eval_samples = positive(v)?,
            "eval_k" => p.eval_k = positive(v)?,
            "mode_rule" => p.mode_rule = ModeRule::parse(v).ok_or_else(|| choices(v, "ml, nearest"))?,
            "joint_reading" => {
                p.joint_reading = JointReading::parse(v).ok_or_else(|| choices(v, "mean-log, log-mean-exp"))?
            }
            "labeled_per_class" => p.labeled_per_class = positive(v)?,
            "unlabeled" => p.unlabeled = positive(v)?,
            "seeds" => p.seeds = positive(v)?,
            "proposals" => p.proposals = positive(v)?,
            "checkpoint" => p.checkpoint = if v == "none" { None } else { Some(PathBuf::from(non_empty(v)?)) },
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every key with its current value, one per line.
    pub fn echo(&self) -> String {
        let (r, p) = (&self.run, &self.params);
        let opt = |o: Option<usize>| o.map_or("auto".to_string(), |v| v.to_string());
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("experiment", self.experiment.as_str().into());
        put("out", self.out.display().to_string());
        put("seed", r.seed.to_string());
        put("particles", r.particles.to_string());
        put("theta_particles", opt(r.theta_particles));
        put("iw_samples", r.iw_samples.to_string());
        put("method", r.method.as_str().into());
        put("batch", r.batch.to_string());
        put("labeled_batch", opt(r.labeled_batch));
        put("epochs", r.epochs.to_string());
        put("lr", format!("{:?}", r.lr));
        put("label_lr", format!("{:?}", r.label_lr));
        put(
            "code_step",
            match r.code_step {
                StepRule::Raw { .. } => "raw",
                StepRule::Adam(_) => "adam",
            }
            .into(),
        );
        put("code_lr", format!("{:?}", step_lr(&r.code_step)));
        put(
            "fit_rule",
            match r.fit_rule {
                FitRule::Gradient { .. } => "gd",
                FitRule::Adam(_) => "adam",
            }
            .into(),
        );
        put("fit_lr", format!("{:?}", fit_lr(&r.fit_rule)));
        put("fit_steps", r.fit_steps.to_string());
        put("zeta", r.zeta.map_or("auto".to_string(), |z| format!("{z:?}")));
        put("bandwidth_mode", r.kernel.mode.as_str().into());
        put(
            "bandwidth",
            r.kernel.fixed_bandwidth.map_or("median".to_string(), |h| format!("{h:?}")),
        );
        put("shared_noise", r.shared_noise.to_string());
        put("theta_averaging", r.theta_averaging.as_str().into());
        put("shuffle", r.shuffle.to_string());
        put("train_size", p.train_size.to_string());
        put("test_size", p.test_size.to_string());
        put("boundary_points", p.boundary_points.to_string());
        put("hidden", p.hidden.to_string());
        put(
            "activation",
            match p.activation {
                Activation::Softplus => "softplus",
                Activation::LeakyRelu { .. } => "leaky-relu",
                _ => "tanh",
            }
            .into(),
        );
        put("learn_theta", p.learn_theta.to_string());
        put("eval_samples", p.eval_samples.to_string());
        put("eval_k", p.eval_k.to_string());
        put("mode_rule", p.mode_rule.as_str().into());
        put("joint_reading", p.joint_reading.as_str().into());
        put("labeled_per_class", p.labeled_per_class.to_string());
        put("unlabeled", p.unlabeled.to_string());
        put("seeds", p.seeds.to_string());
        put("proposals", p.proposals.to_string());
        put(
            "checkpoint",
            p.checkpoint.as_ref().map_or("none".to_string(), |c| c.display().to_string()),
        );
        out
    }
}

fn step_lr(rule: &StepRule) -> f64 {
    match rule {
        StepRule::Raw { step } => *step,
        StepRule::Adam(c) => c.lr,
    }
}

fn fit_lr(rule: &FitRule) -> f64 {
    match rule {
        FitRule::Gradient { lr } => *lr,
        FitRule::Adam(c) => c.lr,
    }
}

type Parsed<T> = std::result::Result<T, String>;

fn choices(v: &str, allowed: &str) -> String {
    format!("`{v}` is not one of: {allowed}")
}

fn num<T: std::str::FromStr>(v: &str) -> Parsed<T> {
    v.parse().map_err(|_| format!("`{v}` is not a valid number"))
}

fn positive(v: &str) -> Parsed<usize> {
    match num::<usize>(v)? {
        0 => Err("must be at least 1".into()),
        n => Ok(n),
    }
}

fn float(v: &str) -> Parsed<f64> {
    let f: f64 = num(v)?;
    if f.is_finite() {
        Ok(f)
    } else {
        Err(format!("`{v}` is not finite"))
    }
}

fn positive_float(v: &str) -> Parsed<f64> {
    let f = float(v)?;
    if f > 0.0 {
        Ok(f)
    } else {
        Err("must be positive".into())
    }
}

fn boolean(v: &str) -> Parsed<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(choices(v, "true, false")),
    }
}

fn auto<T>(v: &str, inner: fn(&str) -> Parsed<T>) -> Parsed<Option<T>> {
    if v == "auto" {
        Ok(None)
    } else {
        inner(v).map(Some)
    }
}

fn non_empty(v: &str) -> Parsed<&str> {
    if v.is_empty() {
        Err("must not be empty".into())
    } else {
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_keeps_the_global_defaults() {
        let mut s = ExperimentSpec::defaults(Experiment::Check);
        s.apply_text("").unwrap();
        assert_eq!(s.run.particles, 100);
        assert_eq!(s.run.iw_samples, 50);
        assert_eq!(s.run.batch, 64);
        assert_eq!(s.run.lr, 0.0002);
        // overlays never touch the minibatch size or the decoder rate
        for e in Experiment::ALL {
            let s = ExperimentSpec::defaults(e);
            assert_eq!((s.run.batch, s.run.lr), (64, 0.0002), "{}", e.as_str());
        }
    }

    #[test]
    fn echo_round_trips() {
        let mut s = ExperimentSpec::defaults(Experiment::SemisupToy);
        s.apply_text("lr = 0.1234567890123\nzeta = 3.5\nbandwidth = 0.7\ncheckpoint = a/b.json\nactivation = leaky-relu")
            .unwrap();
        let mut back = ExperimentSpec::base(Experiment::Check);
        back.apply_text(&s.echo()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn errors_name_the_line_and_key() {
        let mut s = ExperimentSpec::base(Experiment::Gmm);
        let err = s.apply_text("# comment\n\nbatch = 12x").unwrap_err();
        match err {
            Error::Config { line, key, .. } => {
                assert_eq!(line, 3);
                assert_eq!(key, "batch");
            }
            other => panic!("{other}"),
        }
        assert!(s.apply_text("nonsense = 1").is_err());
        assert!(s.apply_text("no equals sign").is_err());
        assert!(s.apply_flag("particles=0").is_err());
        assert!(s.apply_flag("method=viwae").is_ok());
        assert_eq!(s.run.method, Method::Viwae);
    }

    #[test]
    fn step_rules_keep_their_rate_when_switched() {
        let mut s = ExperimentSpec::base(Experiment::Gmm);
        s.apply_text("code_lr = 0.05\ncode_step = adam\nfit_rule = adam\nfit_lr = 0.01").unwrap();
        assert_eq!(s.run.code_step, StepRule::Adam(AdamConfig::with_lr(0.05)));
        assert_eq!(s.run.fit_rule, FitRule::Adam(AdamConfig::with_lr(0.01)));
    }
}
