//! Command-line front end: argument parsing, spec assembly and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;

use crate::config::{Experiment, ExperimentSpec};
use crate::error::{Error, Result};
use crate::experiments::{failures, run_experiment, Report};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECKS_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const THREADS_ENV: &str = "STEINFLOW_THREADS";

#[derive(Debug, Parser)]
#[command(name = "steinflow", version, about = "Stein variational autoencoder experiments")]
pub struct Args {
    /// gmm, pfa, density-toy, semisup-toy or check
    pub experiment: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long = "iw-samples")]
    pub iw_samples: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Any config key, e.g. `--set method=viwae`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Defaults of the experiment, then the config file, then flags.
pub fn build_spec(args: &Args) -> Result<ExperimentSpec> {
    let experiment = Experiment::parse(&args.experiment).ok_or_else(|| Error::Config {
        line: 0,
        key: "experiment".into(),
        message: format!("unknown experiment `{}`", args.experiment),
    })?;
    let mut spec = ExperimentSpec::defaults(experiment);
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            line: 0,
            key: "config".into(),
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        spec.apply_text(&text)?;
    }
    spec.experiment = experiment;
    let mut flags: Vec<(&str, String)> = Vec::new();
    if let Some(v) = args.seed {
        flags.push(("seed", v.to_string()));
    }
    if let Some(v) = args.particles {
        flags.push(("particles", v.to_string()));
    }
    if let Some(v) = args.iw_samples {
        flags.push(("iw_samples", v.to_string()));
    }
    if let Some(v) = args.epochs {
        flags.push(("epochs", v.to_string()));
    }
    if let Some(v) = args.batch {
        flags.push(("batch", v.to_string()));
    }
    if let Some(v) = args.lr {
        flags.push(("lr", format!("{v:?}")));
    }
    if let Some(v) = &args.out {
        flags.push(("out", v.display().to_string()));
    }
    for (k, v) in flags {
        spec.set(k, &v)?;
    }
    for s in &args.set {
        spec.apply_flag(s)?;
    }
    Ok(spec)
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn metrics_csv(report: &Report) -> String {
    let mut out = String::from("epoch,minibatch,metric_name,value,seed\n");
    for m in &report.metrics {
        let mb = m.minibatch.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", m.epoch, mb, m.name, float(m.value), m.seed);
    }
    out
}

pub fn samples_csv(report: &Report) -> String {
    let mut out = String::from("datum_id,sample_id,dim,value\n");
    for s in &report.samples {
        for (d, v) in s.values.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", s.datum_id, s.sample_id, d, float(*v));
        }
    }
    out
}

pub fn summary_text(spec: &ExperimentSpec, report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "experiment = {}", spec.experiment.as_str());
    let _ = writeln!(out, "seed = {}", spec.run.seed);
    let _ = writeln!(out, "passed = {}", report.passed());
    let _ = writeln!(out, "checks = {}", report.checks.len());
    let _ = writeln!(out, "failed = {}", report.checks.iter().filter(|c| !c.passed).count());
    for (k, v) in &report.summary {
        let _ = writeln!(out, "{k} = {}", float(*v));
    }
    for c in &report.checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(
            out,
            "check.{} = {status} value={} reference={} tolerance={}",
            c.name,
            float(c.value),
            float(c.reference),
            float(c.tolerance)
        );
    }
    out
}

/// Writes the four report files into `dir`.
pub fn write_outputs(dir: &Path, spec: &ExperimentSpec, report: &Report) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), spec.echo())?;
    fs::write(dir.join("metrics.csv"), metrics_csv(report))?;
    fs::write(dir.join("samples.csv"), samples_csv(report))?;
    fs::write(dir.join("summary.txt"), summary_text(spec, report))?;
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config {
            line: 0,
            key: THREADS_ENV.into(),
            message: format!("`{v}` is not a positive integer"),
        })?;
    // a pool that already exists (tests) is left as it is
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs one experiment and returns the process exit code.
pub fn run(args: &Args) -> i32 {
    let spec = match configure_threads().and_then(|_| build_spec(args)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("steinflow: {e}");
            return EXIT_CONFIG;
        }
    };
    let report = match run_experiment(&spec) {
        Ok(r) => r,
        Err(e @ Error::Config { .. }) => {
            eprintln!("steinflow: {e}");
            return EXIT_CONFIG;
        }
        Err(e) => {
            eprintln!("steinflow: {} failed: {e}", spec.experiment.as_str());
            return EXIT_RUNTIME;
        }
    };
    if let Err(e) = write_outputs(&spec.out, &spec, &report) {
        eprintln!("steinflow: writing {}: {e}", spec.out.display());
        return EXIT_RUNTIME;
    }
    let failed = failures(&report);
    for line in &failed {
        eprintln!("FAIL {line}");
    }
    println!(
        "{}: {} of {} checks passed; reports in {}",
        spec.experiment.as_str(),
        report.checks.len() - failed.len(),
        report.checks.len(),
        spec.out.display()
    );
    if failed.is_empty() {
        EXIT_OK
    } else {
        EXIT_CHECKS_FAILED
    }
}
