//! Trajectory analysis: PCA projection, per-dimension traces, curvature
//! profiles, and endpoint/distribution error metrics.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::GaussianMixture;
use crate::par::Exec;
use crate::rng::{stream_rng, Stream};
use crate::solver::Trajectory;

/// Principal axes of a point cloud, sorted by descending variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` orthonormal row vectors.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
}

impl Pca {
    pub fn fit(points: &[Vec<f64>], k: usize) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(Error::invalid(format!("PCA needs at least 2 states, got {n}")));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::invalid("PCA input has mixed dimensions"));
        }
        if k == 0 || k > d {
            return Err(Error::invalid(format!("k = {k} must be in 1..={d}")));
        }
        let mut mean = vec![0.0; d];
        for p in points {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);

        let mut cov = DMatrix::<f64>::zeros(d, d);
        for p in points {
            let c: Vec<f64> = p.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in i..d {
                    cov[(i, j)] += c[i] * c[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / (n - 1) as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let total: f64 = cov.diagonal().iter().sum();
        let scale = mean.iter().map(|m| m * m).sum::<f64>().max(1.0);
        if total.is_nan() || total <= 1e-24 * scale {
            return Err(Error::DegenerateBasis("states have zero variance".into()));
        }

        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut components = Vec::with_capacity(k);
        let mut explained_variance = Vec::with_capacity(k);
        for &i in order.iter().take(k) {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            // Sign convention: largest-magnitude coordinate is positive.
            let pivot = v
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(1.0);
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            explained_variance.push(eig.eigenvalues[i].max(0.0));
        }
        let explained_ratio = explained_variance.iter().map(|v| v / total).collect();
        Ok(Self {
            mean,
            components,
            explained_variance,
            explained_ratio,
        })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((a, v), m)| a * (v - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (c, zi) in self.components.iter().zip(z) {
            for (xj, cj) in x.iter_mut().zip(c) {
                *xj += zi * cj;
            }
        }
        x
    }
}

/// Which states the PCA basis is fit on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcaFit {
    /// Reference trajectories only; others are projected into that basis.
    #[default]
    Reference,
    /// Reference and other trajectories pooled together.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub pca: Pca,
    /// Projected states of each reference trajectory, then each other one.
    pub reference: Vec<Vec<Vec<f64>>>,
    pub others: Vec<Vec<Vec<f64>>>,
}

/// Fits a shared basis and projects every trajectory's recorded states into it.
pub fn pca_project(reference: &[Trajectory], others: &[Trajectory], k: usize, fit: PcaFit) -> Result<PcaProjection> {
    let mut pool: Vec<Vec<f64>> = reference.iter().flat_map(|t| t.states.iter().cloned()).collect();
    if fit == PcaFit::Pooled {
        pool.extend(others.iter().flat_map(|t| t.states.iter().cloned()));
    }
    let pca = Pca::fit(&pool, k)?;
    let d = pca.mean.len();
    let project = |set: &[Trajectory]| -> Result<Vec<Vec<Vec<f64>>>> {
        set.iter()
            .map(|t| {
                if t.dim() != d {
                    return Err(Error::invalid(format!(
                        "trajectory has dimension {}, basis has {d}",
                        t.dim()
                    )));
                }
                Ok(t.states.iter().map(|x| pca.project(x)).collect())
            })
            .collect()
    };
    Ok(PcaProjection {
        reference: project(reference)?,
        others: project(others)?,
        pca,
    })
}

/// Values of the selected coordinates along a trajectory, one series per dimension.
pub fn dimension_traces(trajectory: &Trajectory, dims: &[usize]) -> Result<Vec<Vec<f64>>> {
    let d = trajectory.dim();
    if let Some(&bad) = dims.iter().find(|&&i| i >= d) {
        return Err(Error::invalid(format!(
            "dimension {bad} out of range for {d}-dim trajectory"
        )));
    }
    Ok(dims
        .iter()
        .map(|&i| trajectory.states.iter().map(|x| x[i]).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureProfile {
    /// Time of each interior point.
    pub times: Vec<f64>,
    /// Turning angle in radians at each interior point.
    pub angles: Vec<f64>,
    /// Distance of each state from the straight `x0 -> x1` chord, divided by
    /// the chord length.
    pub chord_deviation: Vec<f64>,
}

impl CurvatureProfile {
    /// Mean angle over interior points with `t` in `range`, or `None` if empty.
    pub fn mean_angle_in(&self, range: impl std::ops::RangeBounds<f64>) -> Option<f64> {
        let sel: Vec<f64> = self
            .times
            .iter()
            .zip(&self.angles)
            .filter(|(t, _)| range.contains(t))
            .map(|(_, a)| *a)
            .collect();
        (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
    }

    /// `(early, late)` mean angles for `t < 0.25` and `t > 0.5`.
    pub fn phase_means(&self) -> (Option<f64>, Option<f64>) {
        use std::ops::Bound::{Excluded, Unbounded};
        (
            self.mean_angle_in(..0.25),
            self.mean_angle_in((Excluded(0.5), Unbounded)),
        )
    }
}

/// Angle between two vectors, accurate near 0 and pi.
fn angle_between(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Turning angles between successive segments of a recorded trajectory.
pub fn curvature_profile(trajectory: &Trajectory) -> Result<CurvatureProfile> {
    if !trajectory.is_recorded() {
        return Err(Error::invalid("curvature needs a recorded trajectory"));
    }
    let xs = &trajectory.states;
    let ts = trajectory.schedule.points();
    let seg: Vec<Vec<f64>> = xs
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect())
        .collect();
    let angles = seg.windows(2).map(|w| angle_between(&w[0], &w[1])).collect();
    let times = ts[1..ts.len() - 1].to_vec();

    let (x0, x1) = (&xs[0], &xs[xs.len() - 1]);
    let chord: Vec<f64> = x1.iter().zip(x0).map(|(b, a)| b - a).collect();
    let len = norm(&chord);
    let chord_deviation = xs
        .iter()
        .map(|x| {
            if len == 0.0 {
                return distance(x, x0);
            }
            let rel: Vec<f64> = x.iter().zip(x0).map(|(v, a)| v - a).collect();
            let along = rel.iter().zip(&chord).map(|(r, c)| r * c).sum::<f64>() / (len * len);
            let off: f64 = rel
                .iter()
                .zip(&chord)
                .map(|(r, c)| (r - along * c).powi(2))
                .sum::<f64>()
                .sqrt();
            off / len
        })
        .collect();
    Ok(CurvatureProfile {
        times,
        angles,
        chord_deviation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub endpoint_l2: f64,
    pub dist_energy: f64,
}

/// Per-pair L2 distances between matched endpoints.
pub fn endpoint_distances(candidate: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<Vec<f64>> {
    if candidate.is_empty() || candidate.len() != reference.len() {
        return Err(Error::invalid(format!(
            "unmatched run sets: {} candidate vs {} reference endpoints",
            candidate.len(),
            reference.len()
        )));
    }
    candidate
        .iter()
        .zip(reference)
        .enumerate()
        .map(|(i, (a, b))| {
            if a.len() != b.len() {
                return Err(Error::invalid(format!("pair {i} has mismatched dimensions")));
            }
            Ok(distance(a, b))
        })
        .collect()
}

/// Mean L2 distance between seed-matched endpoints.
pub fn endpoint_error(candidate: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    let d = endpoint_distances(candidate, reference)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|` with all pairs included
/// (V-statistic), so identical clouds score exactly 0 and scores are never negative.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>], exec: Exec) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("energy distance needs non-empty clouds"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != d) {
        return Err(Error::invalid("energy distance inputs have mixed dimensions"));
    }
    let mean_dist = |p: &[Vec<f64>], q: &[Vec<f64>]| -> f64 {
        let rows = exec.map(p.len(), |i| q.iter().map(|y| distance(&p[i], y)).sum::<f64>());
        rows.iter().sum::<f64>() / (p.len() * q.len()) as f64
    };
    let e = 2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b);
    Ok(e.max(0.0))
}

/// Minimum sample count for [`distribution_error`].
pub const MIN_DISTRIBUTION_SAMPLES: usize = 100;

/// Energy distance between `samples` and a same-size fresh draw from `target`.
pub fn distribution_error(samples: &[Vec<f64>], target: &GaussianMixture, seed: u64, exec: Exec) -> Result<f64> {
    if samples.len() < MIN_DISTRIBUTION_SAMPLES {
        return Err(Error::invalid(format!(
            "distribution error needs at least {MIN_DISTRIBUTION_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let draw = target.sample(samples.len(), seed)?;
    energy_distance(samples, &draw, exec)
}

/// Fraction of bootstrap resamples of `values` whose mean is strictly positive.
pub fn bootstrap_confidence(values: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    if values.is_empty() || resamples == 0 {
        return Err(Error::invalid("bootstrap needs values and at least one resample"));
    }
    let mut rng = stream_rng(seed, Stream::Valset, u32::MAX as u64);
    let n = values.len();
    let positive = (0..resamples)
        .filter(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() > 0.0)
        .count();
    Ok(positive as f64 / resamples as f64)
}
