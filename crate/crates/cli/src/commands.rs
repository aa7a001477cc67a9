use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use epss_core::bench::{sweep, write_sweep_csv, BenchConfig, Environment};
use epss_core::diagnostics::{
    curvature_profile, dimension_traces, distribution_error, pca_project, PcaFit, MIN_DISTRIBUTION_SAMPLES,
};
use epss_core::io::{
    read_samples_csv, read_trajectory, save_checkpoint, write_loss_csv, write_samples_csv, write_trajectory_csv,
    write_trajectory_json, RunMeta,
};
use epss_core::model::smoothed;
use epss_core::pruner::{compare_schedules, exhaustive_prune, greedy_prune, valset, PruneOptions};
use epss_core::{
    batch_solve, predicted_cost, sample_prior, train as train_model, Condition, DataSource, EpssPreset, Error, Exec,
    Result, Schedule, SolveOptions, SwayCoefficient, Trajectory,
};

use crate::config::{builtin_mixture, check_dim, load_field, resolve_schedule, RunConfig};

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajFormat {
    Csv,
    Json,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = writer(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

/// Echo of the fully resolved configuration, enough to rerun the command.
fn write_manifest<T: Serialize>(dir: &Path, command: &str, config: &T) -> Result<()> {
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
        }),
    )
}

fn solve_options(c: &RunConfig) -> SolveOptions {
    SolveOptions {
        method: c.method,
        cfg: c.cfg,
        cond: c.label.map_or(Condition::Null, Condition::Label),
        record: false,
    }
}

fn load_data(spec: &str) -> Result<DataSource> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        return builtin_mixture(name).map(DataSource::Mixture);
    }
    let path = Path::new(spec);
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let (points, labels) = read_samples_csv(path)?;
        Ok(DataSource::Samples { points, labels })
    } else {
        Ok(DataSource::Mixture(epss_core::io::read_mixture(path)?))
    }
}

pub fn train(c: &RunConfig) -> Result<()> {
    let spec = c
        .data
        .as_deref()
        .ok_or_else(|| Error::config("data", "no training data given (use --data or `data` in the config)"))?;
    let data = load_data(spec)?;
    if let Some(d) = c.dim {
        if d != data.dim()? {
            return Err(Error::config(
                "dim",
                format!("config says {d}, data has {}", data.dim()?),
            ));
        }
    }
    let out = train_model(&c.train, &data)?;
    let dir = c.out_dir("train");
    create_dir(&dir)?;
    let ckpt = dir.join("checkpoint.json");
    save_checkpoint(&out.params, Some(&c.train), writer(&ckpt)?)?;
    write_loss_csv(&out.loss_curve, writer(&dir.join("loss.csv"))?)?;
    write_manifest(&dir, "train", c)?;
    let sm = smoothed(&out.loss_curve, 100);
    println!(
        "trained {} steps; smoothed loss {:.4} -> {:.4}",
        out.loss_curve.len(),
        sm.first().copied().unwrap_or(f64::NAN),
        sm.last().copied().unwrap_or(f64::NAN)
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

pub fn sample(c: &RunConfig, record: bool, format: TrajFormat) -> Result<()> {
    let field = load_field(&c.field)?;
    let f = field.as_dyn();
    check_dim(c, f)?;
    let schedule = resolve_schedule(&c.schedule, c.sway()?)?;
    if c.batch == 0 {
        return Err(Error::config("batch", "must be >= 1"));
    }
    let x0 = sample_prior(c.batch, f.dim(), c.seed)?;
    let opts = SolveOptions {
        record,
        ..solve_options(c)
    };
    let runs = batch_solve(f, &x0, &schedule, &opts, Exec::default())?;
    let endpoints = runs.endpoints();

    let dir = c.out_dir("sample");
    create_dir(&dir)?;
    write_samples_csv(&endpoints, None, writer(&dir.join("endpoints.csv"))?)?;
    if record {
        for (i, traj) in runs.trajectories.iter().enumerate() {
            let meta = RunMeta {
                schedule_name: c.schedule.clone(),
                sway: c.sway,
                method: c.method,
                cfg: c.cfg,
                cond: opts.cond,
                seed: c.seed,
                sample: i,
            };
            match format {
                TrajFormat::Csv => write_trajectory_csv(traj, &meta, writer(&dir.join(format!("traj_{i:04}.csv")))?)?,
                TrajFormat::Json => {
                    write_trajectory_json(traj, &meta, writer(&dir.join(format!("traj_{i:04}.json")))?)?
                }
            }
        }
    }
    let account = predicted_cost(&schedule, c.method, &c.cfg);
    let dist_energy = match field.mixture() {
        Some(g) if endpoints.len() >= MIN_DISTRIBUTION_SAMPLES => {
            Some(distribution_error(&endpoints, g, c.seed, Exec::default())?)
        }
        _ => None,
    };
    write_json(
        &dir.join("summary.json"),
        &json!({
            "schedule": schedule,
            "reported_nfe": account.reported_nfe,
            "field_evaluations_per_sample": account.field_evaluations,
            "field_evaluations": runs.evaluations,
            "samples": endpoints.len(),
            "dist_energy": dist_energy,
        }),
    )?;
    write_manifest(&dir, "sample", c)?;
    println!(
        "{} samples over {} steps ({} field evaluations) -> {}",
        endpoints.len(),
        account.reported_nfe,
        runs.evaluations,
        dir.display()
    );
    Ok(())
}

pub fn analyze(inputs: &[PathBuf], k: usize, dims: &[usize], fit: PcaFit, out: Option<PathBuf>) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::config("inputs", "no trajectory files given"));
    }
    let mut trajs: Vec<Trajectory> = Vec::with_capacity(inputs.len());
    for p in inputs {
        let t = read_trajectory(p)?.into_trajectory()?;
        if let Some(first) = trajs.first() {
            if t.dim() != first.dim() {
                return Err(Error::InvalidArgument(format!(
                    "{} has dimension {}, but {} has {}",
                    p.display(),
                    t.dim(),
                    inputs[0].display(),
                    first.dim()
                )));
            }
        }
        trajs.push(t);
    }
    let dir = out.unwrap_or_else(|| RunConfig::default().out_dir("analyze"));
    create_dir(&dir)?;

    let proj = pca_project(&trajs[..1], &trajs[1..], k, fit)?;
    let mut w = csv::Writer::from_writer(writer(&dir.join("pca.csv"))?);
    let mut head = vec!["file".to_string(), "step".into(), "t".into()];
    head.extend((0..k).map(|i| format!("pc{i}")));
    w.write_record(&head)?;
    let all = proj.reference.iter().chain(&proj.others);
    for ((path, traj), states) in inputs.iter().zip(&trajs).zip(all) {
        for (step, (t, z)) in traj.schedule.points().iter().zip(states).enumerate() {
            let mut row = vec![path.display().to_string(), step.to_string(), t.to_string()];
            row.extend(z.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;

    for &d in dims {
        let mut w = csv::Writer::from_writer(writer(&dir.join(format!("trace_dim{d}.csv")))?);
        w.write_record(["file", "step", "t", "value"])?;
        for (path, traj) in inputs.iter().zip(&trajs) {
            let series = dimension_traces(traj, &[d])?;
            for (step, (t, v)) in traj.schedule.points().iter().zip(&series[0]).enumerate() {
                w.write_record([
                    path.display().to_string(),
                    step.to_string(),
                    t.to_string(),
                    v.to_string(),
                ])?;
            }
        }
        w.flush()?;
    }

    let profiles = trajs
        .iter()
        .zip(inputs)
        .map(|(t, p)| {
            let c = curvature_profile(t)?;
            let (early, late) = c.phase_means();
            Ok(json!({
                "file": p,
                "nfe": t.schedule.nfe(),
                "mean_angle_early": early,
                "mean_angle_late": late,
                "curvature": c,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(
        &dir.join("analysis.json"),
        &json!({
            "pca": {
                "fit": fit,
                "reference": inputs[0],
                "explained_ratio": proj.pca.explained_ratio,
                "components": proj.pca.components,
                "mean": proj.pca.mean,
            },
            "trajectories": profiles,
        }),
    )?;
    write_manifest(
        &dir,
        "analyze",
        &json!({ "inputs": inputs, "pca": k, "dims": dims, "fit": fit, "out": dir }),
    )?;
    println!("analyzed {} trajectories -> {}", trajs.len(), dir.display());
    Ok(())
}

pub fn prune(c: &RunConfig) -> Result<()> {
    let field = load_field(&c.field)?;
    let f = field.as_dyn();
    check_dim(c, f)?;
    let sway = c.sway()?;
    let reference = resolve_schedule(&c.prune.reference, sway)?;
    let vs = valset(c.prune.valset, f.dim(), c.seed)?;
    let opts = PruneOptions {
        solve: solve_options(c),
        target: field.mixture().cloned(),
        target_seed: c.seed,
        ..PruneOptions::default()
    };
    let report = if c.prune.exhaustive {
        exhaustive_prune(f, &reference, c.prune.target_nfe, &vs, &opts)?
    } else {
        greedy_prune(f, &reference, c.prune.target_nfe, &vs, &opts)?
    };
    let mut named: Vec<(String, Schedule)> = vec![("pruned".into(), report.chosen.clone())];
    for p in EpssPreset::ALL {
        named.push((p.name().into(), p.schedule(sway)?));
    }
    let comparison = compare_schedules(f, &reference, &named, &vs, &opts)?;

    let dir = c.out_dir("prune");
    create_dir(&dir)?;
    let path = dir.join("prune_report.json");
    write_json(&path, &json!({ "report": report, "comparison": comparison }))?;
    write_manifest(&dir, "prune", c)?;
    println!("chosen schedule: {}", report.chosen);
    println!("endpoint error: {:.6}", report.error);
    println!("report: {}", path.display());
    Ok(())
}

pub fn bench(c: &RunConfig) -> Result<()> {
    let field = load_field(&c.field)?;
    let f = field.as_dyn();
    check_dim(c, f)?;
    let sway = c.sway()?;
    let schedules = c
        .bench
        .schedules
        .iter()
        .map(|s| Ok((s.clone(), resolve_schedule(s, sway)?)))
        .collect::<Result<Vec<_>>>()?;
    let reference = c
        .bench
        .reference
        .as_deref()
        .map(|r| resolve_schedule(r, sway))
        .transpose()?;
    let config = BenchConfig {
        repeats: c.bench.repeats,
        warmup: c.bench.warmup,
        batch: c.batch,
        dim: f.dim(),
        seed: c.seed,
        solve: solve_options(c),
    };
    let reports = sweep(f, &schedules, &config, reference.as_ref())?;

    let dir = c.out_dir("bench");
    create_dir(&dir)?;
    write_json(
        &dir.join("bench_report.json"),
        &json!({ "environment": Environment::capture(), "reports": reports }),
    )?;
    write_sweep_csv(&reports, writer(&dir.join("bench.csv"))?)?;
    write_manifest(&dir, "bench", c)?;
    for r in &reports {
        println!(
            "{:>8}  nfe {:>3}  evals {:>9}  rtf_analog {:.3e}  (+/- {:.0}%)",
            r.schedule_name,
            r.nfe,
            r.field_evaluations,
            r.rtf_analog,
            100.0 * r.relative_dispersion
        );
    }
    println!("reports: {}", dir.display());
    Ok(())
}

pub fn schedules_list() -> Result<()> {
    for p in EpssPreset::ALL {
        let idx: Vec<String> = p.raw_indices().iter().map(u32::to_string).collect();
        println!("{:<6} nfe {:>2}  [{}]/32", p.name(), p.nfe(), idx.join(", "));
    }
    Ok(())
}

pub fn schedules_show(spec: &str, sway: f64) -> Result<()> {
    let s = SwayCoefficient::new(sway).map_err(|e| Error::config("sway", e.to_string()))?;
    let schedule = resolve_schedule(spec, s)?;
    println!("{schedule}");
    Ok(())
}
