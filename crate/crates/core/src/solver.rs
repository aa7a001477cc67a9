//! Fixed-step ODE integration over a [`Schedule`].
//!
//! Both solvers evaluate the field only at times strictly below 1: Euler
//! uses left endpoints and midpoint evaluations are capped at
//! [`MAX_EVAL_TIME`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Condition, VectorField};
use crate::par::Exec;
use crate::schedule::Schedule;

pub const MAX_EVAL_TIME: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Euler,
    Midpoint,
}

impl Method {
    /// Guided field evaluations per step.
    pub fn evals_per_step(self) -> u64 {
        match self {
            Method::Euler => 1,
            Method::Midpoint => 2,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Midpoint => "midpoint",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Method::Euler),
            "midpoint" => Ok(Method::Midpoint),
            _ => Err(Error::NotFound {
                kind: "method",
                name: s.into(),
                valid: "euler, midpoint".into(),
            }),
        }
    }
}

/// How conditional and unconditional velocities are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfgConvention {
    /// `v_uncond + w (v_cond - v_uncond)`; `w = 1` is plain conditional sampling.
    #[default]
    UncondAnchored,
    /// `v_cond + w (v_cond - v_uncond)`; `w = 0` is plain conditional sampling.
    CondAnchored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfgSpec {
    pub enabled: bool,
    pub strength: f64,
    #[serde(default)]
    pub convention: CfgConvention,
}

impl Default for CfgSpec {
    fn default() -> Self {
        Self::disabled()
    }
}

impl CfgSpec {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            strength: 1.0,
            convention: CfgConvention::UncondAnchored,
        }
    }

    pub fn with_strength(strength: f64) -> Self {
        Self {
            enabled: true,
            strength,
            convention: CfgConvention::UncondAnchored,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.strength.is_finite() || self.strength < 0.0 {
            return Err(Error::invalid(format!(
                "CFG strength must be finite and >= 0, got {}",
                self.strength
            )));
        }
        Ok(())
    }

    /// Network calls per guided evaluation.
    pub fn multiplier(&self) -> u64 {
        if self.enabled {
            2
        } else {
            1
        }
    }

    fn combine(&self, v_cond: &[f64], v_uncond: &[f64], out: &mut [f64]) {
        let w = self.strength;
        match self.convention {
            CfgConvention::UncondAnchored => {
                for ((o, c), u) in out.iter_mut().zip(v_cond).zip(v_uncond) {
                    *o = u + w * (c - u);
                }
            }
            CfgConvention::CondAnchored => {
                for ((o, c), u) in out.iter_mut().zip(v_cond).zip(v_uncond) {
                    *o = c + w * (c - u);
                }
            }
        }
    }
}

/// `v_uncond + w (v_cond - v_uncond)`.
pub fn cfg_combine(v_cond: &[f64], v_uncond: &[f64], w: f64) -> Vec<f64> {
    let mut out = vec![0.0; v_cond.len()];
    CfgSpec::with_strength(w).combine(v_cond, v_uncond, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveOptions {
    pub method: Method,
    pub cfg: CfgSpec,
    pub cond: Condition,
    /// Keep every intermediate state rather than just the endpoints.
    pub record: bool,
}

impl SolveOptions {
    pub fn euler() -> Self {
        Self::default()
    }

    pub fn midpoint() -> Self {
        Self {
            method: Method::Midpoint,
            ..Self::default()
        }
    }

    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }

    pub fn with_cfg(mut self, cfg: CfgSpec) -> Self {
        self.cfg = cfg;
        self
    }

    pub fn with_cond(mut self, cond: Condition) -> Self {
        self.cond = cond;
        self
    }
}

/// States visited by one solve.
///
/// When recorded, `states` has one entry per schedule point; otherwise it
/// holds only the initial and final state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub schedule: Schedule,
    pub states: Vec<Vec<f64>>,
    pub evaluations: u64,
}

impl Trajectory {
    pub fn initial(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn endpoint(&self) -> &[f64] {
        self.states.last().expect("trajectory has states")
    }

    pub fn is_recorded(&self) -> bool {
        self.states.len() == self.schedule.len()
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// `(t_k, x_k)` pairs; requires a recorded trajectory.
    pub fn points(&self) -> impl Iterator<Item = (f64, &[f64])> {
        self.schedule
            .points()
            .iter()
            .copied()
            .zip(self.states.iter().map(Vec::as_slice))
    }
}

struct Workspace {
    v: Vec<f64>,
    v_cond: Vec<f64>,
    v_uncond: Vec<f64>,
    probe: Vec<f64>,
}

impl Workspace {
    fn new(d: usize) -> Self {
        Self {
            v: vec![0.0; d],
            v_cond: vec![0.0; d],
            v_uncond: vec![0.0; d],
            probe: vec![0.0; d],
        }
    }
}

/// Evaluates the (possibly guided) field into `ws.v`; returns network calls made.
fn guided<F: VectorField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    opts: &SolveOptions,
    ws: &mut Workspace,
) -> Result<u64> {
    if opts.cfg.enabled {
        field.velocity(x, t, opts.cond, &mut ws.v_cond)?;
        field.velocity(x, t, Condition::Null, &mut ws.v_uncond)?;
        opts.cfg.combine(&ws.v_cond, &ws.v_uncond, &mut ws.v);
        Ok(2)
    } else {
        field.velocity(x, t, opts.cond, &mut ws.v)?;
        Ok(1)
    }
}

/// Integrates from `x0` at `t = 0` to `t = 1` along `schedule`.
pub fn solve<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    schedule: &Schedule,
    opts: &SolveOptions,
) -> Result<Trajectory> {
    let d = field.dim();
    if x0.len() != d {
        return Err(Error::invalid(format!(
            "initial state has dimension {}, field has {d}",
            x0.len()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial state is not finite"));
    }
    opts.cfg.validate()?;

    let mut ws = Workspace::new(d);
    let mut x = x0.to_vec();
    let mut states = Vec::with_capacity(if opts.record { schedule.len() } else { 2 });
    states.push(x.clone());
    let mut evaluations = 0;

    for (step, (t0, t1)) in schedule.steps().enumerate() {
        let h = t1 - t0;
        match opts.method {
            Method::Euler => {
                evaluations += guided(field, &x, t0, opts, &mut ws)?;
            }
            Method::Midpoint => {
                evaluations += guided(field, &x, t0, opts, &mut ws)?;
                for ((p, xi), vi) in ws.probe.iter_mut().zip(&x).zip(&ws.v) {
                    *p = xi + 0.5 * h * vi;
                }
                let tm = (t0 + 0.5 * h).min(MAX_EVAL_TIME);
                let probe = std::mem::take(&mut ws.probe);
                let r = guided(field, &probe, tm, opts, &mut ws);
                ws.probe = probe;
                evaluations += r?;
            }
        }
        for (xi, vi) in x.iter_mut().zip(&ws.v) {
            *xi += h * vi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalBlowup { step, sample: None });
        }
        if opts.record {
            states.push(x.clone());
        }
    }
    if !opts.record {
        states.push(x);
    }
    Ok(Trajectory {
        schedule: schedule.clone(),
        states,
        evaluations,
    })
}

/// `x_{k+1} = x_k + (t_{k+1} - t_k) v(x_k, t_k)`.
pub fn euler_solve<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    schedule: &Schedule,
    cfg: CfgSpec,
    cond: Condition,
    record: bool,
) -> Result<Trajectory> {
    let opts = SolveOptions {
        method: Method::Euler,
        cfg,
        cond,
        record,
    };
    solve(field, x0, schedule, &opts)
}

/// Explicit midpoint: `x_{k+1} = x_k + h v(x_k + h/2 v(x_k, t_k), t_k + h/2)`.
pub fn midpoint_solve<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    schedule: &Schedule,
    cfg: CfgSpec,
    cond: Condition,
    record: bool,
) -> Result<Trajectory> {
    let opts = SolveOptions {
        method: Method::Midpoint,
        cfg,
        cond,
        record,
    };
    solve(field, x0, schedule, &opts)
}

/// Reported NFE (solver steps, never doubled for guidance) versus actual
/// network calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeAccount {
    pub reported_nfe: usize,
    pub field_evaluations: u64,
}

/// Predicted cost of solving over `schedule`.
pub fn predicted_cost(schedule: &Schedule, method: Method, cfg: &CfgSpec) -> NfeAccount {
    let steps = schedule.nfe();
    NfeAccount {
        reported_nfe: steps,
        field_evaluations: steps as u64 * method.evals_per_step() * cfg.multiplier(),
    }
}

pub fn nfe_accounting(trajectory: &Trajectory, cfg: &CfgSpec, method: Method) -> NfeAccount {
    predicted_cost(&trajectory.schedule, method, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSolve {
    pub trajectories: Vec<Trajectory>,
    pub evaluations: u64,
}

impl BatchSolve {
    pub fn endpoints(&self) -> Vec<Vec<f64>> {
        self.trajectories.iter().map(|t| t.endpoint().to_vec()).collect()
    }
}

/// Independent per-sample solves; output order matches input order.
pub fn batch_solve<F: VectorField + ?Sized>(
    field: &F,
    x0: &[Vec<f64>],
    schedule: &Schedule,
    opts: &SolveOptions,
    exec: Exec,
) -> Result<BatchSolve> {
    if let Some(bad) = x0.iter().position(|x| x.len() != field.dim()) {
        return Err(Error::invalid(format!(
            "sample {bad} has dimension {}, field has {}",
            x0[bad].len(),
            field.dim()
        )));
    }
    let trajectories = exec.try_map(x0.len(), |i| {
        solve(field, &x0[i], schedule, opts).map_err(|e| match e {
            Error::NumericalBlowup { step, .. } => Error::NumericalBlowup { step, sample: Some(i) },
            other => other,
        })
    })?;
    let evaluations = trajectories.iter().map(|t| t.evaluations).sum();
    Ok(BatchSolve {
        trajectories,
        evaluations,
    })
}

/// Endpoints only, without keeping trajectory objects around.
pub fn batch_endpoints<F: VectorField + ?Sized>(
    field: &F,
    x0: &[Vec<f64>],
    schedule: &Schedule,
    opts: &SolveOptions,
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    let opts = SolveOptions { record: false, ..*opts };
    Ok(batch_solve(field, x0, schedule, &opts, exec)?.endpoints())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{CountingField, FnField};
    use crate::oracle::{sample_prior, GaussianMixture};
    use crate::schedule::{EpssPreset, SwayCoefficient};

    fn constant(c: [f64; 2]) -> impl VectorField {
        FnField::new(2, move |_x, _t, out: &mut [f64]| out.copy_from_slice(&c))
    }

    #[test]
    fn constant_field_is_exact_for_any_schedule() {
        let f = constant([0.5, -2.0]);
        let x0 = [1.0, 1.0];
        for s in [
            Schedule::uniform(1).unwrap(),
            Schedule::uniform(7).unwrap(),
            EpssPreset::Nfe6b.schedule(SwayCoefficient::new(-1.0).unwrap()).unwrap(),
        ] {
            for opts in [SolveOptions::euler(), SolveOptions::midpoint()] {
                let tr = solve(&f, &x0, &s, &opts).unwrap();
                assert!((tr.endpoint()[0] - 1.5).abs() < 1e-14);
                assert!((tr.endpoint()[1] + 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn euler_time_only_field_first_order() {
        let f = FnField::new(1, |_x, t, out: &mut [f64]| out[0] = 2.0 * t);
        let tr = solve(&f, &[0.0], &Schedule::uniform(2).unwrap(), &SolveOptions::euler()).unwrap();
        assert_eq!(tr.endpoint()[0], 0.5);
        // Left Riemann sum of 2t: error is exactly 1/nfe.
        for nfe in [4, 8, 16] {
            let tr = solve(&f, &[0.0], &Schedule::uniform(nfe).unwrap(), &SolveOptions::euler()).unwrap();
            assert!((1.0 - tr.endpoint()[0] - 1.0 / nfe as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn midpoint_single_step_of_exponential() {
        let f = FnField::new(1, |x, _t, out: &mut [f64]| out[0] = x[0]);
        let tr = solve(&f, &[2.0], &Schedule::uniform(1).unwrap(), &SolveOptions::midpoint()).unwrap();
        assert!((tr.endpoint()[0] - 5.0).abs() < 1e-15);
        assert!((std::f64::consts::E * 2.0 - tr.endpoint()[0]).abs() > 0.4);
    }

    #[test]
    fn midpoint_never_evaluates_at_one() {
        let f = FnField::new(1, |_x, t, out: &mut [f64]| {
            assert!(t < 1.0);
            out[0] = 1.0;
        });
        solve(&f, &[0.0], &Schedule::uniform(3).unwrap(), &SolveOptions::midpoint()).unwrap();
        let g = GaussianMixture::toy();
        let tr = solve(
            &g,
            &[0.1, 0.2],
            &Schedule::uniform(4).unwrap(),
            &SolveOptions::midpoint(),
        );
        assert!(tr.is_ok());
    }

    #[test]
    fn recording_contract() {
        let g = GaussianMixture::toy();
        let s = Schedule::uniform(5).unwrap();
        let rec = solve(&g, &[0.3, -0.3], &s, &SolveOptions::euler().recording()).unwrap();
        assert_eq!(rec.states.len(), 6);
        assert!(rec.is_recorded());
        assert_eq!(rec.initial(), &[0.3, -0.3]);
        let bare = solve(&g, &[0.3, -0.3], &s, &SolveOptions::euler()).unwrap();
        assert_eq!(bare.states.len(), 2);
        assert_eq!(bare.endpoint(), rec.endpoint());
    }

    #[test]
    fn blowup_is_reported_with_step() {
        let f = FnField::new(1, |x, t, out: &mut [f64]| {
            out[0] = if t > 0.4 { f64::INFINITY } else { x[0] }
        });
        let err = solve(&f, &[1.0], &Schedule::uniform(4).unwrap(), &SolveOptions::euler()).unwrap_err();
        assert!(matches!(err, Error::NumericalBlowup { step: 2, sample: None }), "{err}");
        let batch = vec![vec![1.0]; 3];
        let err = batch_solve(
            &f,
            &batch,
            &Schedule::uniform(4).unwrap(),
            &SolveOptions::euler(),
            Exec::Parallel,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::NumericalBlowup {
                step: 2,
                sample: Some(0)
            }
        ));
    }

    #[test]
    fn cfg_combine_examples() {
        let c = [1.0, -3.0];
        let u = [0.5, 4.0];
        assert_eq!(cfg_combine(&c, &u, 1.0), c.to_vec());
        assert_eq!(cfg_combine(&c, &u, 0.0), u.to_vec());
        assert_eq!(cfg_combine(&[2.0, 0.0], &[0.0, 0.0], 2.0), vec![4.0, 0.0]);
        for w in [0.0, 0.5, 2.0, 7.5] {
            assert_eq!(cfg_combine(&c, &c, w), c.to_vec());
        }
        let mut out = [0.0; 2];
        let alt = CfgSpec {
            convention: CfgConvention::CondAnchored,
            ..CfgSpec::with_strength(2.0)
        };
        alt.combine(&[2.0, 0.0], &[0.0, 0.0], &mut out);
        assert_eq!(out, [6.0, 0.0]);
    }

    #[test]
    fn cfg_strength_validation() {
        let g = GaussianMixture::toy();
        let opts = SolveOptions::euler().with_cfg(CfgSpec::with_strength(f64::NAN));
        assert!(solve(&g, &[0.0, 0.0], &Schedule::uniform(2).unwrap(), &opts).is_err());
    }

    #[test]
    fn nfe_accounting_examples() {
        let sway = SwayCoefficient::new(-1.0).unwrap();
        let s7 = EpssPreset::Nfe7.schedule(sway).unwrap();
        let g = CountingField::new(GaussianMixture::toy());
        let cfg = CfgSpec::with_strength(2.0);
        let tr = solve(&g, &[0.0, 0.1], &s7, &SolveOptions::euler().with_cfg(cfg)).unwrap();
        let acct = nfe_accounting(&tr, &cfg, Method::Euler);
        assert_eq!(
            acct,
            NfeAccount {
                reported_nfe: 7,
                field_evaluations: 14
            }
        );
        assert_eq!(tr.evaluations, 14);
        assert_eq!(g.evaluations(), 14);

        let s32 = Schedule::uniform(32).unwrap();
        assert_eq!(
            predicted_cost(&s32, Method::Euler, &CfgSpec::disabled()),
            NfeAccount {
                reported_nfe: 32,
                field_evaluations: 32
            }
        );
        let s16 = EpssPreset::Nfe16.schedule(sway).unwrap();
        g.reset();
        let tr = solve(&g, &[0.0, 0.1], &s16, &SolveOptions::midpoint().with_cfg(cfg)).unwrap();
        assert_eq!(nfe_accounting(&tr, &cfg, Method::Midpoint).field_evaluations, 64);
        assert_eq!(tr.evaluations, 64);
        assert_eq!(g.evaluations(), 64);
    }

    #[test]
    fn batch_of_one_and_permutation() {
        let g = GaussianMixture::toy();
        let s = EpssPreset::Nfe10.schedule(SwayCoefficient::new(-1.0).unwrap()).unwrap();
        let opts = SolveOptions::midpoint().recording();
        let xs = sample_prior(16, 2, 1).unwrap();
        let single = solve(&g, &xs[3], &s, &opts).unwrap();
        let one = batch_solve(&g, &xs[3..4], &s, &opts, Exec::Parallel).unwrap();
        assert_eq!(one.trajectories[0], single);

        let fwd = batch_solve(&g, &xs, &s, &opts, Exec::Parallel).unwrap();
        let rev_in: Vec<_> = xs.iter().rev().cloned().collect();
        let rev = batch_solve(&g, &rev_in, &s, &opts, Exec::Sequential).unwrap();
        for (a, b) in fwd.trajectories.iter().zip(rev.trajectories.iter().rev()) {
            assert_eq!(a, b);
        }
        assert_eq!(fwd.evaluations, 16 * 10 * 2);
        assert_eq!(fwd.evaluations, rev.evaluations);
    }

    #[test]
    fn self_convergence_on_oracle_field() {
        let g = GaussianMixture::toy();
        let x0 = sample_prior(32, 2, 5).unwrap();
        let end = |n: usize| {
            batch_endpoints(
                &g,
                &x0,
                &Schedule::uniform(n).unwrap(),
                &SolveOptions::euler(),
                Exec::default(),
            )
            .unwrap()
        };
        let diff = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            a.iter()
                .zip(b)
                .map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
                .sum::<f64>()
        };
        let (e256, e512, e1024) = (end(256), end(512), end(1024));
        assert!(diff(&e512, &e1024) < diff(&e256, &e512));
    }

    fn mean_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / a.len() as f64
    }

    #[test]
    fn error_ratios_against_closed_form_gaussian_flow() {
        // A single Gaussian target is reached by x_1 = mu + sigma x_0.
        let (mu, sigma) = ([1.0, -0.5], 0.5);
        let g = GaussianMixture::single(mu.to_vec(), sigma).unwrap();
        let x0 = sample_prior(16, 2, 3).unwrap();
        let exact: Vec<Vec<f64>> = x0
            .iter()
            .map(|x| vec![mu[0] + sigma * x[0], mu[1] + sigma * x[1]])
            .collect();
        let err = |opts: SolveOptions, n: usize| {
            let ends = batch_endpoints(&g, &x0, &Schedule::uniform(n).unwrap(), &opts, Exec::default()).unwrap();
            mean_error(&ends, &exact)
        };
        let euler = err(SolveOptions::euler(), 32) / err(SolveOptions::euler(), 64);
        assert!((euler - 2.0).abs() < 0.1, "{euler}");
        // The midpoint rule superconverges on this flow: the h^2 term cancels.
        let mid = err(SolveOptions::midpoint(), 32) / err(SolveOptions::midpoint(), 64);
        assert!((mid - 8.0).abs() < 0.4, "{mid}");
    }

    #[test]
    fn midpoint_is_second_order_on_a_mixture() {
        let g = GaussianMixture::new(
            2,
            vec![
                crate::oracle::Component {
                    weight: 0.6,
                    mean: vec![1.0, 0.0],
                    sigma: 0.8,
                },
                crate::oracle::Component {
                    weight: 0.4,
                    mean: vec![-1.0, 1.0],
                    sigma: 0.3,
                },
            ],
        )
        .unwrap();
        let x0 = sample_prior(16, 2, 4).unwrap();
        let opts = SolveOptions::midpoint();
        let end = |n: usize| batch_endpoints(&g, &x0, &Schedule::uniform(n).unwrap(), &opts, Exec::default()).unwrap();
        let reference = end(4096);
        let ratio = mean_error(&end(32), &reference) / mean_error(&end(64), &reference);
        assert!((ratio - 4.0).abs() < 0.6, "{ratio}");
    }
}
