//! Wall-clock and evaluation-count benchmarking of sampling runs.
//!
//! Timed runs always solve on the calling thread, whatever execution mode
//! the rest of the crate uses, so timings stay comparable across machines
//! with different core counts.

use std::io::Write;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::diagnostics::endpoint_error;
use crate::error::{Error, Result};
use crate::field::{CountingField, VectorField};
use crate::oracle::sample_prior;
use crate::par::Exec;
use crate::schedule::Schedule;
use crate::solver::{batch_endpoints, predicted_cost, SolveOptions};

/// Definition of the denominator of `rtf_analog`, echoed into every report.
pub const UNIT_DEFINITION: &str = "generated units = samples x dim; rtf_analog = wall seconds / generated units";

/// Expected run-to-run spread of wall-clock measurements.
pub const VARIABILITY_NOTE: &str =
    "wall-clock figures typically vary by about 10% between runs; compare ratios and orderings, not absolute values";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub repeats: usize,
    pub warmup: usize,
    pub batch: usize,
    /// Must match the field's dimension; 0 means "take it from the field".
    pub dim: usize,
    pub seed: u64,
    pub solve: SolveOptions,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repeats: 10,
            warmup: 3,
            batch: 256,
            dim: 0,
            seed: 0,
            solve: SolveOptions::euler(),
        }
    }
}

/// Host description stored in each report header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub cpu_model: Option<String>,
    pub timestamp_unix: u64,
    pub timer_resolution_ns: u64,
    pub threads: usize,
}

impl Environment {
    pub fn capture() -> Self {
        Self {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            cpu_model: cpu_model(),
            timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            timer_resolution_ns: timer_resolution().as_nanos() as u64,
            threads: 1,
        }
    }
}

fn cpu_model() -> Option<String> {
    let info = std::fs::read_to_string("/proc/cpuinfo").ok()?;
    info.lines()
        .find(|l| l.starts_with("model name") || l.starts_with("Hardware"))
        .and_then(|l| l.split_once(':'))
        .map(|(_, v)| v.trim().to_string())
}

/// Smallest non-zero step observed on the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub environment: Environment,
    pub schedule_name: String,
    pub schedule: Schedule,
    pub nfe: usize,
    pub config: BenchConfig,
    pub unit_definition: String,
    pub total_wall_seconds: f64,
    pub total_generated_units: u64,
    /// Mean-based: total wall seconds over total generated units.
    pub rtf_analog: f64,
    /// Median repeat time over per-repeat generated units.
    pub rtf_analog_median: f64,
    /// Population standard deviation of repeat times over their mean.
    pub relative_dispersion: f64,
    pub field_evaluations: u64,
    pub predicted_evaluations: u64,
    pub per_repeat_seconds: Vec<f64>,
    /// Sum of every endpoint coordinate; identical across runs with the same seed.
    pub endpoint_checksum: f64,
    /// Seed-matched error against a reference schedule, when one was given.
    pub endpoint_l2: Option<f64>,
    pub variability_note: String,
}

fn in_repeat(repeat: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::InRepeat {
        repeat,
        source: Box::new(e),
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `repeats` batch solves after `warmup` untimed ones.
///
/// Repeat indices in errors count timed runs from 0; a failure during
/// warmup is reported as repeat 0.
pub fn run_bench<F: VectorField + ?Sized>(
    field: &F,
    name: &str,
    schedule: &Schedule,
    config: &BenchConfig,
) -> Result<BenchReport> {
    bench_with_reference(field, name, schedule, config, None)
}

fn bench_with_reference<F: VectorField + ?Sized>(
    field: &F,
    name: &str,
    schedule: &Schedule,
    config: &BenchConfig,
    reference: Option<&[Vec<f64>]>,
) -> Result<BenchReport> {
    if config.repeats == 0 {
        return Err(Error::config("repeats", "must be >= 1"));
    }
    if config.batch == 0 {
        return Err(Error::config("batch", "must be >= 1"));
    }
    let dim = field.dim();
    if config.dim != 0 && config.dim != dim {
        return Err(Error::config(
            "dim",
            format!("config says {}, field has {dim}", config.dim),
        ));
    }
    config.solve.cfg.validate()?;
    let x0 = sample_prior(config.batch, dim, config.seed)?;
    let counted = CountingField::new(field);
    let opts = SolveOptions {
        record: false,
        ..config.solve
    };

    for _ in 0..config.warmup {
        batch_endpoints(&counted, &x0, schedule, &opts, Exec::Sequential).map_err(in_repeat(0))?;
    }
    counted.reset();

    let mut per_repeat_seconds = Vec::with_capacity(config.repeats);
    let mut endpoints = Vec::new();
    for r in 0..config.repeats {
        let start = Instant::now();
        let ends = batch_endpoints(&counted, &x0, schedule, &opts, Exec::Sequential).map_err(in_repeat(r))?;
        per_repeat_seconds.push(start.elapsed().as_secs_f64());
        endpoints = ends;
    }

    let units_per_repeat = (config.batch * dim) as u64;
    let total_generated_units = units_per_repeat * config.repeats as u64;
    let total_wall_seconds: f64 = per_repeat_seconds.iter().sum();
    let mean = total_wall_seconds / config.repeats as f64;
    let var = per_repeat_seconds.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / config.repeats as f64;
    let endpoint_l2 = reference.map(|r| endpoint_error(&endpoints, r)).transpose()?;
    let predicted = predicted_cost(schedule, opts.method, &opts.cfg).field_evaluations
        * config.batch as u64
        * config.repeats as u64;

    Ok(BenchReport {
        environment: Environment::capture(),
        schedule_name: name.to_string(),
        schedule: schedule.clone(),
        nfe: schedule.nfe(),
        config: BenchConfig { dim, ..*config },
        unit_definition: UNIT_DEFINITION.to_string(),
        total_wall_seconds,
        total_generated_units,
        rtf_analog: total_wall_seconds / total_generated_units as f64,
        rtf_analog_median: median(&per_repeat_seconds) / units_per_repeat as f64,
        relative_dispersion: if mean > 0.0 { var.sqrt() / mean } else { 0.0 },
        field_evaluations: counted.evaluations(),
        predicted_evaluations: predicted,
        per_repeat_seconds,
        endpoint_checksum: endpoints.iter().flatten().sum(),
        endpoint_l2,
        variability_note: VARIABILITY_NOTE.to_string(),
    })
}

/// One report per schedule. With a reference schedule, each report also
/// carries its seed-matched endpoint error against it.
pub fn sweep<F: VectorField + ?Sized>(
    field: &F,
    schedules: &[(String, Schedule)],
    config: &BenchConfig,
    reference: Option<&Schedule>,
) -> Result<Vec<BenchReport>> {
    if schedules.is_empty() {
        return Ok(Vec::new());
    }
    let ref_ends = match reference {
        Some(r) => {
            let x0 = sample_prior(config.batch.max(1), field.dim(), config.seed)?;
            Some(batch_endpoints(field, &x0, r, &config.solve, Exec::Sequential)?)
        }
        None => None,
    };
    schedules
        .iter()
        .map(|(name, s)| bench_with_reference(field, name, s, config, ref_ends.as_deref()))
        .collect()
}

/// Combined CSV: `name,nfe,evaluations,rtf_analog,endpoint_l2`.
pub fn write_sweep_csv<W: Write>(reports: &[BenchReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["name", "nfe", "evaluations", "rtf_analog", "endpoint_l2"])?;
    for r in reports {
        w.write_record([
            r.schedule_name.clone(),
            r.nfe.to_string(),
            r.field_evaluations.to_string(),
            format!("{:e}", r.rtf_analog),
            r.endpoint_l2.map(|e| format!("{e:e}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
