//! File formats: trajectories, sample sets, loss curves and checkpoints.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Condition;
use crate::model::{MlpConfig, MlpParams, TrainConfig};
use crate::oracle::GaussianMixture;
use crate::schedule::Schedule;
use crate::solver::{CfgSpec, Method, Trajectory};

/// Run metadata carried in trajectory file headers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunMeta {
    pub schedule_name: String,
    pub sway: f64,
    pub method: Method,
    pub cfg: CfgSpec,
    pub cond: Condition,
    pub seed: u64,
    pub sample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub meta: RunMeta,
    pub t: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

fn header(dim: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain((0..dim).map(|i| format!("x{i}")))
        .collect()
}

/// CSV with a `# {json meta}` first line, then `t,x0,...,x{d-1}`, one row per point.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, meta: &RunMeta, mut out: W) -> Result<()> {
    if !traj.is_recorded() {
        return Err(Error::invalid("only recorded trajectories can be exported"));
    }
    writeln!(out, "# {}", serde_json::to_string(meta)?)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(traj.dim()))?;
    for (t, x) in traj.points() {
        w.write_record(std::iter::once(t).chain(x.iter().copied()).map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trajectory_json<W: Write>(traj: &Trajectory, meta: &RunMeta, out: W) -> Result<()> {
    if !traj.is_recorded() {
        return Err(Error::invalid("only recorded trajectories can be exported"));
    }
    let file = TrajectoryFile {
        meta: meta.clone(),
        t: traj.schedule.points().to_vec(),
        states: traj.states.clone(),
    };
    serde_json::to_writer_pretty(out, &file)?;
    Ok(())
}

fn parse_csv_rows<R: Read>(reader: R) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let headers = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    Ok((headers, rows))
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Syntax(format!("{what}: `{s}` is not a number")))
}

/// Reads a trajectory written by [`write_trajectory_csv`] or
/// [`write_trajectory_json`], chosen by file extension.
pub fn read_trajectory(path: &Path) -> Result<TrajectoryFile> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let file = if is_json {
        serde_json::from_reader(BufReader::new(fs::File::open(path)?))?
    } else {
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let (meta, rest): (RunMeta, Box<dyn Read>) = match first.strip_prefix('#') {
            Some(json) => (serde_json::from_str(json.trim())?, Box::new(reader)),
            None => (
                RunMeta::default(),
                Box::new(std::io::Cursor::new(first.into_bytes()).chain(reader)),
            ),
        };
        let (headers, rows) = parse_csv_rows(rest)?;
        if headers.first().map(String::as_str) != Some("t") || headers.len() < 2 {
            return Err(Error::Syntax(format!("{}: expected header `t,x0,...`", path.display())));
        }
        let mut t = Vec::with_capacity(rows.len());
        let mut states = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let what = format!("{} row {}", path.display(), i + 1);
            t.push(parse_f64(&row[0], &what)?);
            states.push(row[1..].iter().map(|v| parse_f64(v, &what)).collect::<Result<_>>()?);
        }
        TrajectoryFile { meta, t, states }
    };
    if file.t.len() != file.states.len() {
        return Err(Error::Syntax(format!(
            "{}: {} times but {} states",
            path.display(),
            file.t.len(),
            file.states.len()
        )));
    }
    Ok(file)
}

impl TrajectoryFile {
    pub fn into_trajectory(self) -> Result<Trajectory> {
        let schedule = Schedule::new(self.t)?;
        let d = self.states.first().map_or(0, Vec::len);
        if d == 0 || self.states.iter().any(|s| s.len() != d) {
            return Err(Error::invalid("trajectory states have inconsistent dimensions"));
        }
        Ok(Trajectory {
            schedule,
            states: self.states,
            evaluations: 0,
        })
    }
}

/// Points with optional labels as CSV: `x0,...,x{d-1}[,label]`.
pub fn write_samples_csv<W: Write>(points: &[Vec<f64>], labels: Option<&[Option<u32>]>, out: W) -> Result<()> {
    let d = points.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    let mut head: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    if labels.is_some() {
        head.push("label".into());
    }
    w.write_record(&head)?;
    for (i, p) in points.iter().enumerate() {
        let mut row: Vec<String> = p.iter().map(f64::to_string).collect();
        if let Some(l) = labels {
            row.push(l.get(i).copied().flatten().map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub type LabeledPoints = (Vec<Vec<f64>>, Vec<Option<u32>>);

pub fn read_samples_csv(path: &Path) -> Result<LabeledPoints> {
    let (headers, rows) = parse_csv_rows(fs::File::open(path)?)?;
    let label_col = headers.iter().position(|h| h == "label");
    let mut points = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let what = format!("{} row {}", path.display(), i + 1);
        let mut p = Vec::with_capacity(row.len());
        let mut label = None;
        for (j, v) in row.iter().enumerate() {
            if Some(j) == label_col {
                if !v.trim().is_empty() {
                    label = Some(
                        v.trim()
                            .parse()
                            .map_err(|_| Error::Syntax(format!("{what}: bad label `{v}`")))?,
                    );
                }
            } else {
                p.push(parse_f64(v, &what)?);
            }
        }
        points.push(p);
        labels.push(label);
    }
    Ok((points, labels))
}

/// `step,loss` rows.
pub fn write_loss_csv<W: Write>(curve: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss"])?;
    for (i, l) in curve.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub const CHECKPOINT_FORMAT: &str = "epss-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub network: MlpConfig,
    pub parameter_count: usize,
    pub train: Option<TrainConfig>,
    pub params: Vec<f64>,
}

pub fn save_checkpoint<W: Write>(params: &MlpParams, train: Option<&TrainConfig>, out: W) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        network: params.config,
        parameter_count: params.len(),
        train: train.copied(),
        params: params.as_slice().to_vec(),
    };
    serde_json::to_writer(out, &ck)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(MlpParams, Option<TrainConfig>)> {
    let text = fs::read_to_string(path)?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::CorruptedModel(format!("{}: {e}", path.display())))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::CorruptedModel(format!(
            "{}: unsupported format {} v{}",
            path.display(),
            ck.format,
            ck.version
        )));
    }
    if ck.params.len() != ck.parameter_count {
        return Err(Error::CorruptedModel(format!(
            "{}: header says {} parameters, found {}",
            path.display(),
            ck.parameter_count,
            ck.params.len()
        )));
    }
    let params = MlpParams::from_flat(ck.network, ck.params)
        .map_err(|e| Error::CorruptedModel(format!("{}: {e}", path.display())))?;
    if !params.is_finite() {
        return Err(Error::CorruptedModel(format!(
            "{}: non-finite parameters",
            path.display()
        )));
    }
    Ok((params, ck.train))
}

pub fn read_mixture(path: &Path) -> Result<GaussianMixture> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::sample_prior;
    use crate::solver::{solve, SolveOptions};

    fn recorded() -> Trajectory {
        let g = GaussianMixture::toy();
        let x0 = sample_prior(1, 2, 0).unwrap();
        solve(
            &g,
            &x0[0],
            &Schedule::uniform(5).unwrap(),
            &SolveOptions::euler().recording(),
        )
        .unwrap()
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let traj = recorded();
        let meta = RunMeta {
            schedule_name: "u5".into(),
            seed: 9,
            ..RunMeta::default()
        };
        write_trajectory_csv(&traj, &meta, fs::File::create(&path).unwrap()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap() == "t,x0,x1");
        assert_eq!(text.lines().count(), 2 + 6);
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back.meta, meta);
        let t2 = back.into_trajectory().unwrap();
        assert_eq!(t2.states, traj.states);
        assert_eq!(t2.schedule, traj.schedule);
    }

    #[test]
    fn trajectory_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let traj = recorded();
        write_trajectory_json(&traj, &RunMeta::default(), fs::File::create(&path).unwrap()).unwrap();
        let back = read_trajectory(&path).unwrap().into_trajectory().unwrap();
        assert_eq!(back.states, traj.states);
    }

    #[test]
    fn headerless_csv_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.csv");
        fs::write(&path, "t,x0\n0,1\n0.5,2\n1,3\n").unwrap();
        let f = read_trajectory(&path).unwrap();
        assert_eq!(f.states, vec![vec![1.0], vec![2.0], vec![3.0]]);
        fs::write(&path, "t,x0\n0,1\n1,zz\n").unwrap();
        assert!(matches!(read_trajectory(&path), Err(Error::Syntax(_))));
    }

    #[test]
    fn samples_round_trip_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let pts = vec![vec![1.5, -2.0], vec![0.25, 3.0]];
        let labels = vec![Some(1), None];
        write_samples_csv(&pts, Some(&labels), fs::File::create(&path).unwrap()).unwrap();
        let (p, l) = read_samples_csv(&path).unwrap();
        assert_eq!(p, pts);
        assert_eq!(l, labels);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut p = MlpParams::init(MlpConfig::new(2, 2), 4).unwrap();
        p.randomize_head(4);
        save_checkpoint(&p, Some(&TrainConfig::default()), fs::File::create(&path).unwrap()).unwrap();
        let (q, cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(cfg, Some(TrainConfig::default()));
    }

    #[test]
    fn corrupted_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptedModel(_))));

        let p = MlpParams::init(MlpConfig::new(2, 1), 0).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&p, None, &mut buf).unwrap();
        let mut ck: Checkpoint = serde_json::from_slice(&buf).unwrap();
        ck.params.pop();
        fs::write(&path, serde_json::to_string(&ck).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptedModel(_))));
    }
}
