//! Schedule pruning: search subsets of a dense reference schedule for
//! low-NFE schedules with small seed-matched endpoint error.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{endpoint_error, energy_distance};
use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::oracle::{sample_prior_stream, GaussianMixture};
use crate::par::Exec;
use crate::rng::Stream;
use crate::schedule::{EpssPreset, Schedule, SwayCoefficient};
use crate::solver::{batch_endpoints, predicted_cost, SolveOptions};

/// Smallest validation batch the pruner accepts.
pub const MIN_VALSET: usize = 32;
/// Largest subset count [`exhaustive_prune`] will enumerate.
pub const MAX_SUBSETS: u128 = 100_000;
/// Relative tolerance under which two candidate errors count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Seeded standard-normal validation starts.
pub fn valset(n: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    sample_prior_stream(n, dim, seed, Stream::Valset)
}

/// The 32-step schedule warped with `s = -1`.
pub fn default_reference() -> Schedule {
    EpssPreset::Nfe32
        .schedule(SwayCoefficient::new(-1.0).expect("valid sway"))
        .expect("preset is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMetric {
    /// Mean L2 distance to the reference endpoints from the same start.
    #[default]
    EndpointL2,
    /// Energy distance between the candidate and reference endpoint clouds.
    EnergyToReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOptions {
    pub metric: PruneMetric,
    pub solve: SolveOptions,
    /// When set, table rows also report energy distance to fresh target draws.
    pub target: Option<GaussianMixture>,
    pub target_seed: u64,
    /// Maximum rows kept in the report table.
    pub table_limit: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for PruneOptions {
    fn default() -> Self {
        Self {
            metric: PruneMetric::EndpointL2,
            solve: SolveOptions::euler(),
            target: None,
            target_seed: 0,
            table_limit: 32,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub schedule: Schedule,
    pub endpoint_l2: f64,
    pub dist_energy: Option<f64>,
    pub evaluations: u64,
}

/// One greedy round: every candidate removal with its error, and the one taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRound {
    /// `(index into the reference schedule, error after removing it)`.
    pub candidates: Vec<(usize, f64)>,
    pub removed_index: usize,
    pub removed_time: f64,
    pub error_before: f64,
    pub error_after: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub reference: Schedule,
    pub chosen: Schedule,
    /// Indices of the chosen points within the reference.
    pub chosen_indices: Vec<usize>,
    pub metric: PruneMetric,
    pub error: f64,
    /// Sorted by `endpoint_l2`.
    pub table: Vec<CandidateRow>,
    pub trace: Vec<PruneRound>,
    pub tie_break: String,
}

impl PruneReport {
    /// Chosen points with `t < lo` and `t > hi`.
    pub fn count_split(&self, lo: f64, hi: f64) -> (usize, usize) {
        let p = self.chosen.points();
        (
            p.iter().filter(|&&t| t < lo).count(),
            p.iter().filter(|&&t| t > hi).count(),
        )
    }
}

struct Evaluator<'a, F: ?Sized> {
    field: &'a F,
    reference: &'a Schedule,
    valset: &'a [Vec<f64>],
    opts: &'a PruneOptions,
    ref_endpoints: Vec<Vec<f64>>,
}

impl<'a, F: VectorField + ?Sized> Evaluator<'a, F> {
    fn new(
        field: &'a F,
        reference: &'a Schedule,
        target_nfe: usize,
        valset: &'a [Vec<f64>],
        opts: &'a PruneOptions,
    ) -> Result<Self> {
        if target_nfe < 1 {
            return Err(Error::invalid("target NFE must be at least 1"));
        }
        if target_nfe > reference.nfe() {
            return Err(Error::invalid(format!(
                "target NFE {target_nfe} exceeds reference NFE {}",
                reference.nfe()
            )));
        }
        if valset.len() < MIN_VALSET {
            return Err(Error::invalid(format!(
                "validation set needs at least {MIN_VALSET} samples, got {}",
                valset.len()
            )));
        }
        let ref_endpoints = batch_endpoints(field, valset, reference, &opts.solve, opts.exec)?;
        Ok(Self {
            field,
            reference,
            valset,
            opts,
            ref_endpoints,
        })
    }

    fn endpoints(&self, schedule: &Schedule, exec: Exec) -> Result<Vec<Vec<f64>>> {
        batch_endpoints(self.field, self.valset, schedule, &self.opts.solve, exec)
    }

    fn score(&self, ends: &[Vec<f64>], exec: Exec) -> Result<f64> {
        match self.opts.metric {
            PruneMetric::EndpointL2 => endpoint_error(ends, &self.ref_endpoints),
            PruneMetric::EnergyToReference => energy_distance(ends, &self.ref_endpoints, exec),
        }
    }

    /// Metric for the reference subset given by `indices`. Used inside
    /// parallel loops, so it solves sequentially.
    fn metric(&self, indices: &[usize]) -> Result<f64> {
        let s = self.reference.select(indices)?;
        let ends = self.endpoints(&s, Exec::Sequential)?;
        self.score(&ends, Exec::Sequential)
    }

    fn row(&self, indices: &[usize]) -> Result<CandidateRow> {
        let schedule = self.reference.select(indices)?;
        let ends = self.endpoints(&schedule, self.opts.exec)?;
        let endpoint_l2 = endpoint_error(&ends, &self.ref_endpoints)?;
        let dist_energy = match &self.opts.target {
            Some(g) => {
                let draw = g.sample(ends.len(), self.opts.target_seed)?;
                Some(energy_distance(&ends, &draw, self.opts.exec)?)
            }
            None => None,
        };
        let evaluations = predicted_cost(&schedule, self.opts.solve.method, &self.opts.solve.cfg).field_evaluations
            * self.valset.len() as u64;
        Ok(CandidateRow {
            schedule,
            endpoint_l2,
            dist_energy,
            evaluations,
        })
    }

    fn table(&self, subsets: &[Vec<usize>]) -> Result<Vec<CandidateRow>> {
        let mut rows = subsets.iter().map(|s| self.row(s)).collect::<Result<Vec<_>>>()?;
        rows.sort_by(|a, b| a.endpoint_l2.total_cmp(&b.endpoint_l2));
        rows.truncate(self.opts.table_limit.max(1));
        Ok(rows)
    }
}

fn ties_with(e: f64, best: f64) -> bool {
    e <= best + TIE_TOLERANCE * best.abs()
}

/// Removes one interior point per round, always the one whose removal
/// gives the smallest error; ties remove the latest point.
pub fn greedy_prune<F: VectorField + ?Sized>(
    field: &F,
    reference: &Schedule,
    target_nfe: usize,
    valset: &[Vec<f64>],
    opts: &PruneOptions,
) -> Result<PruneReport> {
    let ev = Evaluator::new(field, reference, target_nfe, valset, opts)?;
    let mut kept: Vec<usize> = (0..reference.len()).collect();
    let mut current = 0.0;
    let mut trace = Vec::new();
    let mut history = vec![kept.clone()];

    while kept.len() - 1 > target_nfe {
        let interior = &kept[1..kept.len() - 1];
        let errors = opts.exec.try_map(interior.len(), |j| {
            let trial: Vec<usize> = kept.iter().copied().filter(|&k| k != interior[j]).collect();
            ev.metric(&trial)
        })?;
        let best = errors.iter().copied().fold(f64::INFINITY, f64::min);
        let pick = (0..interior.len())
            .rev()
            .find(|&j| ties_with(errors[j], best))
            .expect("at least one candidate");
        let removed = interior[pick];
        trace.push(PruneRound {
            candidates: interior.iter().copied().zip(errors.iter().copied()).collect(),
            removed_index: removed,
            removed_time: reference.points()[removed],
            error_before: current,
            error_after: errors[pick],
            delta: errors[pick] - current,
        });
        current = errors[pick];
        kept.retain(|&k| k != removed);
        history.push(kept.clone());
    }

    let table = ev.table(&history)?;
    Ok(PruneReport {
        reference: reference.clone(),
        chosen: reference.select(&kept)?,
        chosen_indices: kept,
        metric: opts.metric,
        error: current,
        table,
        trace,
        tie_break: format!(
            "candidates within relative {TIE_TOLERANCE:e} of the round minimum are tied; the latest point is removed"
        ),
    })
}

/// Number of subsets [`exhaustive_prune`] would evaluate.
pub fn subset_count(reference: &Schedule, target_nfe: usize) -> u128 {
    let n = reference.len().saturating_sub(2) as u128;
    let k = target_nfe.saturating_sub(1) as u128;
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Evaluates every subset of interior points of the right size; ties go to
/// the lexicographically smallest index set.
pub fn exhaustive_prune<F: VectorField + ?Sized>(
    field: &F,
    reference: &Schedule,
    target_nfe: usize,
    valset: &[Vec<f64>],
    opts: &PruneOptions,
) -> Result<PruneReport> {
    let count = subset_count(reference, target_nfe);
    if count > MAX_SUBSETS {
        return Err(Error::TooLarge(format!(
            "{count} subsets exceed the limit of {MAX_SUBSETS}"
        )));
    }
    let ev = Evaluator::new(field, reference, target_nfe, valset, opts)?;
    let last = reference.len() - 1;
    let subsets: Vec<Vec<usize>> = (1..last)
        .combinations(target_nfe - 1)
        .map(|mid| std::iter::once(0).chain(mid).chain(std::iter::once(last)).collect())
        .collect();
    let errors = opts.exec.try_map(subsets.len(), |i| ev.metric(&subsets[i]))?;
    let best = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let pick = errors
        .iter()
        .position(|&e| ties_with(e, best))
        .expect("at least one subset");

    let mut order: Vec<usize> = (0..subsets.len()).collect();
    order.sort_by(|&a, &b| errors[a].total_cmp(&errors[b]));
    order.truncate(opts.table_limit.max(1));
    let top: Vec<Vec<usize>> = order.into_iter().map(|i| subsets[i].clone()).collect();
    let table = ev.table(&top)?;

    Ok(PruneReport {
        reference: reference.clone(),
        chosen: reference.select(&subsets[pick])?,
        chosen_indices: subsets[pick].clone(),
        metric: opts.metric,
        error: errors[pick],
        table,
        trace: Vec::new(),
        tie_break: format!(
            "subsets within relative {TIE_TOLERANCE:e} of the minimum are tied; the lexicographically smallest index set wins"
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub nfe: usize,
    #[serde(flatten)]
    pub row: CandidateRow,
}

/// Seed-matched errors of each named schedule against `reference`, in the given order.
pub fn compare_schedules<F: VectorField + ?Sized>(
    field: &F,
    reference: &Schedule,
    schedules: &[(String, Schedule)],
    valset: &[Vec<f64>],
    opts: &PruneOptions,
) -> Result<Vec<ComparisonRow>> {
    if valset.is_empty() {
        return Err(Error::invalid("comparison needs a non-empty validation set"));
    }
    let ref_endpoints = batch_endpoints(field, valset, reference, &opts.solve, opts.exec)?;
    schedules
        .iter()
        .map(|(name, schedule)| {
            let ends = batch_endpoints(field, valset, schedule, &opts.solve, opts.exec)?;
            let dist_energy = match &opts.target {
                Some(g) => Some(energy_distance(
                    &ends,
                    &g.sample(ends.len(), opts.target_seed)?,
                    opts.exec,
                )?),
                None => None,
            };
            Ok(ComparisonRow {
                name: name.clone(),
                nfe: schedule.nfe(),
                row: CandidateRow {
                    schedule: schedule.clone(),
                    endpoint_l2: endpoint_error(&ends, &ref_endpoints)?,
                    dist_energy,
                    evaluations: predicted_cost(schedule, opts.solve.method, &opts.solve.cfg).field_evaluations
                        * valset.len() as u64,
                },
            })
        })
        .collect()
}
