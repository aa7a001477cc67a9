//! Analytic ground-truth flow towards an isotropic Gaussian mixture.
//!
//! Along the straight conditional path `x_t = (1 - t) x_0 + t x_1` with
//! `x_0 ~ N(0, I)` and `x_1` drawn from component `k`, the marginal of `x_t`
//! under that component is `N(t mu_k, v_k(t) I)` with
//! `v_k(t) = (1 - t)^2 + t^2 sigma_k^2`, and
//!
//! ```text
//! E[x_1 - x_0 | x_t = x, k] = mu_k + (t sigma_k^2 - (1 - t)) / v_k(t) * (x - t mu_k)
//! ```
//!
//! The marginal velocity is the responsibility-weighted average of these.
//! [`mc_velocity_oracle`] estimates the same conditional expectation by
//! simulation without using any of the above, and exists to check it.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Condition, VectorField};
use crate::par::Exec;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawMixture {
    dim: usize,
    components: Vec<Component>,
}

/// Mixture of isotropic Gaussians. JSON form:
/// `{"dim": 2, "components": [{"weight": 0.5, "mean": [1, 0], "sigma": 0.3}, ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture", into = "RawMixture")]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
    log_weights: Vec<f64>,
}

impl TryFrom<RawMixture> for GaussianMixture {
    type Error = Error;
    fn try_from(raw: RawMixture) -> Result<Self> {
        GaussianMixture::new(raw.dim, raw.components)
    }
}

impl From<GaussianMixture> for RawMixture {
    fn from(g: GaussianMixture) -> Self {
        RawMixture {
            dim: g.dim,
            components: g.components,
        }
    }
}

impl GaussianMixture {
    pub fn new(dim: usize, components: Vec<Component>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("mixture dimension must be positive"));
        }
        if components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::invalid(format!(
                    "component {k} mean has length {}, expected {dim}",
                    c.mean.len()
                )));
            }
            if !(c.sigma.is_finite() && c.sigma > 0.0) {
                return Err(Error::invalid(format!("component {k} sigma must be > 0")));
            }
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(Error::invalid(format!("component {k} weight must be >= 0")));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::invalid(format!("component {k} mean is not finite")));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights sum to {total}, expected 1")));
        }
        let log_weights = components.iter().map(|c| c.weight.ln()).collect();
        Ok(Self {
            dim,
            components,
            log_weights,
        })
    }

    /// One isotropic Gaussian `N(mean, sigma^2 I)`.
    pub fn single(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        let dim = mean.len();
        Self::new(
            dim,
            vec![Component {
                weight: 1.0,
                mean,
                sigma,
            }],
        )
    }

    /// Equal-weight 2D mixture with modes at `(+offset, 0)` and `(-offset, 0)`.
    pub fn two_mode(offset: f64, sigma: f64) -> Result<Self> {
        Self::new(
            2,
            vec![
                Component {
                    weight: 0.5,
                    mean: vec![offset, 0.0],
                    sigma,
                },
                Component {
                    weight: 0.5,
                    mean: vec![-offset, 0.0],
                    sigma,
                },
            ],
        )
    }

    /// Default schedule-comparison benchmark: two modes far from the prior
    /// relative to its unit scale, so which mode a sample flows to is
    /// settled early and the remaining transport is close to a straight
    /// line.
    pub fn benchmark() -> Self {
        Self::two_mode(40.0, 1.5).expect("valid benchmark mixture")
    }

    /// Small two-mode target used for the training toy task.
    pub fn toy() -> Self {
        Self::two_mode(2.0, 0.5).expect("valid toy mixture")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    fn check_point(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "state has dimension {}, mixture has {}",
                x.len(),
                self.dim
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("time {t} outside [0, 1)")));
        }
        if t == 1.0 {
            return Err(Error::Singularity { t });
        }
        Ok(())
    }

    /// Closed-form marginal velocity `u_t(x)` for `t` in `[0, 1)`.
    pub fn marginal_velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.velocity_into(x, t, &mut out)?;
        Ok(out)
    }

    fn velocity_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.check_point(x, t)?;
        let d = self.dim as f64;
        let one_minus = 1.0 - t;

        // Log-responsibilities, max-subtracted before exponentiation.
        let mut logr: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| {
                let v = one_minus * one_minus + t * t * c.sigma * c.sigma;
                let sq: f64 = x.iter().zip(&c.mean).map(|(xi, mi)| (xi - t * mi).powi(2)).sum();
                lw - 0.5 * d * v.ln() - 0.5 * sq / v
            })
            .collect();
        let max = logr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logr.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }

        out.fill(0.0);
        for (c, r) in self.components.iter().zip(&logr) {
            if *r == 0.0 {
                continue;
            }
            let r = r / total;
            let s2 = c.sigma * c.sigma;
            let v = one_minus * one_minus + t * t * s2;
            let coef = (t * s2 - one_minus) / v;
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(&c.mean) {
                *o += r * (mi + coef * (xi - t * mi));
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singularity { t });
        }
        Ok(())
    }

    /// Draws `n` samples: component by weight, then a Gaussian draw.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        Ok(self.sample_labeled(n, seed)?.into_iter().map(|(x, _)| x).collect())
    }

    /// Like [`GaussianMixture::sample`], also returning each sample's component index.
    pub fn sample_labeled(&self, n: usize, seed: u64) -> Result<Vec<(Vec<f64>, usize)>> {
        if n == 0 {
            return Err(Error::invalid("sample count must be >= 1"));
        }
        let mut rng = stream_rng(seed, Stream::Target, 0);
        Ok((0..n).map(|_| self.draw(&mut rng)).collect())
    }

    pub(crate) fn draw<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let k = self.choose(rng);
        let c = &self.components[k];
        let x = c
            .mean
            .iter()
            .map(|m| m + c.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, k)
    }

    fn choose<R: Rng>(&self, rng: &mut R) -> usize {
        if self.components.len() == 1 {
            return 0;
        }
        // Weights were validated to sum to one, so the index is always constructible.
        WeightedIndex::new(self.components.iter().map(|c| c.weight))
            .expect("validated weights")
            .sample(rng)
    }
}

impl VectorField for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], t: f64, _cond: Condition, out: &mut [f64]) -> Result<()> {
        self.velocity_into(x, t, out)
    }
}

/// `n` i.i.d. standard-normal vectors of length `dim`.
pub fn sample_prior(n: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    sample_prior_stream(n, dim, seed, Stream::Noise)
}

pub(crate) fn sample_prior_stream(n: usize, dim: usize, seed: u64, stream: Stream) -> Result<Vec<Vec<f64>>> {
    if n == 0 || dim == 0 {
        return Err(Error::invalid(format!(
            "prior batch needs n >= 1 and dim >= 1 (got n = {n}, dim = {dim})"
        )));
    }
    let mut rng = stream_rng(seed, stream, 0);
    Ok((0..n)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect())
}

/// Monte Carlo estimate of a conditional velocity, with per-coordinate
/// standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub velocity: Vec<f64>,
    pub std_error: Vec<f64>,
    /// Kish effective sample size of the kernel weights.
    pub effective_samples: f64,
}

const MC_CHUNK: usize = 1 << 15;

/// Nadaraya-Watson estimate of `E[x_1 - x_0 | x_t ~= x]`.
///
/// Simulates `n` independent pairs `(x_0, x_1)` from the prior and the
/// mixture, forms `x_t = (1 - t) x_0 + t x_1` and averages `x_1 - x_0`
/// with Gaussian kernel weights `exp(-|x_t - x|^2 / (2 h^2))`. Chunks are
/// seeded independently, so the result does not depend on thread count.
pub fn mc_velocity_oracle(
    gmm: &GaussianMixture,
    x: &[f64],
    t: f64,
    n: usize,
    bandwidth: f64,
    seed: u64,
) -> Result<McEstimate> {
    if x.len() != gmm.dim {
        return Err(Error::invalid("probe dimension does not match mixture"));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(Error::invalid("bandwidth must be positive"));
    }
    if n == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let d = gmm.dim;
    let chunks = n.div_ceil(MC_CHUNK);
    let inv_2h2 = 1.0 / (2.0 * bandwidth * bandwidth);

    let partials = Exec::default().map(chunks, |c| {
        let mut rng = stream_rng(seed, Stream::Oracle, c as u64);
        let len = MC_CHUNK.min(n - c * MC_CHUNK);
        let mut acc = Moments::new(d);
        let mut x0 = vec![0.0; d];
        let mut y = vec![0.0; d];
        for _ in 0..len {
            for v in x0.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let (x1, _) = gmm.draw(&mut rng);
            let mut sq = 0.0;
            for i in 0..d {
                let xt = (1.0 - t) * x0[i] + t * x1[i];
                sq += (xt - x[i]).powi(2);
                y[i] = x1[i] - x0[i];
            }
            let w = (-sq * inv_2h2).exp();
            if w > 0.0 {
                acc.push(w, &y);
            }
        }
        acc
    });
    let mut total = Moments::new(d);
    for p in &partials {
        total.merge(p);
    }
    total.finish()
}

struct Moments {
    sw: f64,
    sw2: f64,
    swy: Vec<f64>,
    sw2y: Vec<f64>,
    sw2yy: Vec<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self {
            sw: 0.0,
            sw2: 0.0,
            swy: vec![0.0; d],
            sw2y: vec![0.0; d],
            sw2yy: vec![0.0; d],
        }
    }

    fn push(&mut self, w: f64, y: &[f64]) {
        let w2 = w * w;
        self.sw += w;
        self.sw2 += w2;
        for (i, yi) in y.iter().enumerate() {
            self.swy[i] += w * yi;
            self.sw2y[i] += w2 * yi;
            self.sw2yy[i] += w2 * yi * yi;
        }
    }

    fn merge(&mut self, other: &Moments) {
        self.sw += other.sw;
        self.sw2 += other.sw2;
        for i in 0..self.swy.len() {
            self.swy[i] += other.swy[i];
            self.sw2y[i] += other.sw2y[i];
            self.sw2yy[i] += other.sw2yy[i];
        }
    }

    fn finish(self) -> Result<McEstimate> {
        if self.sw.is_nan() || self.sw <= 0.0 || !self.sw.is_finite() {
            return Err(Error::EstimationFailure(
                "no simulated samples fell within the kernel bandwidth".into(),
            ));
        }
        let s = self.sw;
        let velocity: Vec<f64> = self.swy.iter().map(|v| v / s).collect();
        // Delta-method variance of a ratio estimator:
        // sum_j w_j^2 (y_j - m)^2 / (sum_j w_j)^2.
        let std_error = velocity
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let ss = self.sw2yy[i] - 2.0 * m * self.sw2y[i] + m * m * self.sw2;
                ss.max(0.0).sqrt() / s
            })
            .collect();
        Ok(McEstimate {
            velocity,
            std_error,
            effective_samples: s * s / self.sw2,
        })
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    #[test]
    fn single_standard_gaussian_is_zero_at_half() {
        let g = GaussianMixture::single(vec![0.0, 0.0], 1.0).unwrap();
        for x in [[1.0, -2.0], [0.3, 0.7]] {
            let v = g.marginal_velocity(&x, 0.5).unwrap();
            assert!(v.iter().all(|c| c.abs() < 1e-15), "{v:?}");
        }
        // u_t(x) = (2t - 1) / ((1-t)^2 + t^2) * x
        let t: f64 = 0.3;
        let v = g.marginal_velocity(&[1.0, 2.0], t).unwrap();
        let k = (2.0 * t - 1.0) / ((1.0 - t).powi(2) + t * t);
        assert!((v[0] - k).abs() < 1e-14 && (v[1] - 2.0 * k).abs() < 1e-14);
    }

    #[test]
    fn on_mean_path_velocity_is_mean() {
        let mu = vec![1.5, -0.5, 2.0];
        let g = GaussianMixture::single(mu.clone(), 1.0).unwrap();
        for t in [0.0, 0.2, 0.7, 0.99] {
            let x: Vec<f64> = mu.iter().map(|m| t * m).collect();
            let v = g.marginal_velocity(&x, t).unwrap();
            for (a, b) in v.iter().zip(&mu) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn boundary_at_t_zero() {
        let mu = [0.7, -1.2];
        let g = GaussianMixture::single(mu.to_vec(), 1.0).unwrap();
        let x = [0.4, 0.9];
        let v = g.marginal_velocity(&x, 1e-9).unwrap();
        for i in 0..2 {
            assert!((v[i] - (mu[i] - x[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn domain_errors() {
        let g = GaussianMixture::toy();
        assert!(matches!(
            g.marginal_velocity(&[0.0, 0.0], 1.0),
            Err(Error::Singularity { .. })
        ));
        assert!(matches!(
            g.marginal_velocity(&[0.0], 0.5),
            Err(Error::InvalidArgument(_))
        ));
        assert!(g.marginal_velocity(&[0.0, 0.0], 1.5).is_err());
    }

    #[test]
    fn far_from_all_modes_stays_finite() {
        let g = GaussianMixture::benchmark();
        let v = g.marginal_velocity(&[500.0, -300.0], 0.999).unwrap();
        assert!(v.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn mixture_validation() {
        assert!(GaussianMixture::single(vec![0.0], 0.0).is_err());
        let bad_weights = GaussianMixture::new(
            1,
            vec![
                Component {
                    weight: 0.6,
                    mean: vec![0.0],
                    sigma: 1.0,
                },
                Component {
                    weight: 0.6,
                    mean: vec![1.0],
                    sigma: 1.0,
                },
            ],
        );
        assert!(bad_weights.is_err());
        let json = r#"{"dim": 2, "components": [{"weight": 1.0, "mean": [1, 2, 3], "sigma": 1}]}"#;
        assert!(serde_json::from_str::<GaussianMixture>(json).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let g = GaussianMixture::benchmark();
        let back: GaussianMixture = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn prior_statistics() {
        let xs = sample_prior(100_000, 2, 3).unwrap();
        for i in 0..2 {
            let mean = xs.iter().map(|x| x[i]).sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x[i] - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.02, "var {var}");
        }
        assert_eq!(sample_prior(5, 3, 11).unwrap(), sample_prior(5, 3, 11).unwrap());
        let one = sample_prior(1, 1, 0).unwrap();
        assert!(one.len() == 1 && one[0].len() == 1 && one[0][0].is_finite());
        assert!(sample_prior(0, 2, 0).is_err());
    }

    #[test]
    fn target_statistics() {
        let mu = vec![3.0, -1.0];
        let sigma = 0.7;
        let n = 20_000;
        let g = GaussianMixture::single(mu.clone(), sigma).unwrap();
        let xs = g.sample(n, 5).unwrap();
        for i in 0..2 {
            let mean = xs.iter().map(|x| x[i]).sum::<f64>() / n as f64;
            assert!((mean - mu[i]).abs() < 4.0 * sigma / (n as f64).sqrt());
        }
        assert_eq!(g.sample(10, 1).unwrap(), g.sample(10, 1).unwrap());

        let lopsided = GaussianMixture::new(
            1,
            vec![
                Component {
                    weight: 1.0,
                    mean: vec![0.0],
                    sigma: 1.0,
                },
                Component {
                    weight: 0.0,
                    mean: vec![100.0],
                    sigma: 1.0,
                },
            ],
        )
        .unwrap();
        assert!(lopsided.sample_labeled(2_000, 2).unwrap().iter().all(|(_, k)| *k == 0));
        let v = lopsided.marginal_velocity(&[0.5], 0.4).unwrap();
        assert!(v[0].is_finite());
    }

    #[test]
    fn mc_oracle_symmetry_and_degenerate_inputs() {
        let g = GaussianMixture::single(vec![0.0, 0.0], 1.0).unwrap();
        let est = mc_velocity_oracle(&g, &[0.0, 0.0], 0.4, 200_000, 0.1, 1).unwrap();
        for (v, se) in est.velocity.iter().zip(&est.std_error) {
            assert!(v.abs() < 4.0 * se, "{v} vs se {se}");
        }
        // Tiny sample counts may fail to estimate, but must not panic.
        let _ = mc_velocity_oracle(&g, &[0.0, 0.0], 0.4, 10, 0.05, 1);
        let far = mc_velocity_oracle(&g, &[1e3, 1e3], 0.4, 10, 0.05, 1);
        assert!(matches!(far, Err(Error::EstimationFailure(_))));
    }

    #[test]
    fn mc_oracle_independent_of_execution_mode() {
        let g = GaussianMixture::toy();
        let a = mc_velocity_oracle(&g, &[0.5, 0.1], 0.3, 100_000, 0.05, 9).unwrap();
        let b = mc_velocity_oracle(&g, &[0.5, 0.1], 0.3, 100_000, 0.05, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn closed_form_agrees_with_simulation_two_modes() {
        let g = GaussianMixture::new(
            2,
            vec![
                Component {
                    weight: 0.5,
                    mean: vec![2.0, 0.0],
                    sigma: 0.5,
                },
                Component {
                    weight: 0.5,
                    mean: vec![-2.0, 0.0],
                    sigma: 0.5,
                },
            ],
        )
        .unwrap();
        let x = [0.0, 0.0];
        let exact = g.marginal_velocity(&x, 0.3).unwrap();
        let est = mc_velocity_oracle(&g, &x, 0.3, 1_000_000, 0.02, 4).unwrap();
        // By symmetry the first coordinate is 0; compare within 3 standard errors.
        for i in 0..2 {
            assert!(
                (est.velocity[i] - exact[i]).abs() < 3.0 * est.std_error[i],
                "coord {i}: {} vs {} (se {})",
                est.velocity[i],
                exact[i],
                est.std_error[i]
            );
        }
    }
}
