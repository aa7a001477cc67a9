//! Small MLP vector field trained with the conditional flow-matching loss.
//!
//! Input is `[x, time features, condition embedding]`, followed by two tanh
//! hidden layers and a linear head. All parameters live in one flat vector
//! so the optimizer and gradient checks can treat them uniformly; the
//! per-tensor views are derived from [`MlpConfig`].

use std::f64::consts::PI;
use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Condition, VectorField};
use crate::oracle::GaussianMixture;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub dim: usize,
    pub hidden: usize,
    /// Number of sinusoidal time features (even).
    pub time_features: usize,
    /// Size of the label vocabulary, excluding the null label.
    pub n_labels: usize,
    pub cond_dim: usize,
}

impl MlpConfig {
    pub fn new(dim: usize, n_labels: usize) -> Self {
        Self {
            dim,
            hidden: 128,
            time_features: 8,
            n_labels,
            cond_dim: 4,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dim + self.time_features + self.cond_dim
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::invalid("network dim and hidden width must be positive"));
        }
        if !self.time_features.is_multiple_of(2) {
            return Err(Error::invalid("time_features must be even"));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let mut at = 0;
        let mut next = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let (d, h, i) = (self.dim, self.hidden, self.input_dim());
        let embed = next((self.n_labels + 1) * self.cond_dim);
        let w1 = next(h * i);
        let b1 = next(h);
        let w2 = next(h * h);
        let b2 = next(h);
        let w3 = next(d * h);
        let b3 = next(d);
        Layout {
            embed,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            total: at,
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Range<usize>,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    w3: Range<usize>,
    b3: Range<usize>,
    total: usize,
}

/// Network weights (or, as returned by [`grad`], a gradient with the same layout).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub config: MlpConfig,
    data: Vec<f64>,
}

impl MlpParams {
    /// Variance-scaled normal init for hidden layers, zero output head.
    pub fn init(config: MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let lay = config.layout();
        let mut data = vec![0.0; lay.total];
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut fill = |r: Range<usize>, scale: f64| {
            for v in &mut data[r] {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        };
        fill(lay.embed.clone(), 1.0);
        fill(lay.w1.clone(), (1.0 / config.input_dim() as f64).sqrt());
        fill(lay.w2.clone(), (1.0 / config.hidden as f64).sqrt());
        Ok(Self { config, data })
    }

    pub fn zeros(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let total = config.layout().total;
        Ok(Self {
            config,
            data: vec![0.0; total],
        })
    }

    pub fn from_flat(config: MlpConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let total = config.layout().total;
        if data.len() != total {
            return Err(Error::invalid(format!(
                "expected {total} parameters, got {}",
                data.len()
            )));
        }
        Ok(Self { config, data })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mutable view of the output layer weights (`dim x hidden`, row-major).
    pub fn output_weights_mut(&mut self) -> &mut [f64] {
        let r = self.config.layout().w3;
        &mut self.data[r]
    }

    /// Randomizes the output head too; used for gradient checks, where a
    /// zero head would make every upstream gradient vanish.
    pub fn randomize_head(&mut self, seed: u64) {
        let lay = self.config.layout();
        let scale = (1.0 / self.config.hidden as f64).sqrt();
        let mut rng = stream_rng(seed, Stream::Init, 1);
        for i in lay.w3.start..lay.b3.end {
            self.data[i] = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }

    fn label_index(&self, cond: Condition) -> Result<usize> {
        match cond {
            Condition::Null => Ok(self.config.n_labels),
            Condition::Label(l) if (l as usize) < self.config.n_labels => Ok(l as usize),
            Condition::Label(l) => Err(Error::invalid(format!(
                "label {l} outside vocabulary of {}",
                self.config.n_labels
            ))),
        }
    }

    /// Velocity prediction `v(x, t, cond)`.
    pub fn forward(&self, x: &[f64], t: f64, cond: Condition) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.config.dim];
        self.forward_into(x, t, cond, &mut out)?;
        Ok(out)
    }

    fn forward_into(&self, x: &[f64], t: f64, cond: Condition, out: &mut [f64]) -> Result<()> {
        if x.len() != self.config.dim {
            return Err(Error::invalid(format!(
                "input has dimension {}, network expects {}",
                x.len(),
                self.config.dim
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("time {t} outside [0, 1]")));
        }
        let label = self.label_index(cond)?;
        let lay = self.config.layout();
        let mut act = Activations::new(&self.config);
        self.run(&lay, x, t, label, &mut act);
        out.copy_from_slice(&act.out);
        if out.iter().any(|v| !v.is_finite()) {
            if !self.is_finite() {
                return Err(Error::CorruptedModel("parameters contain NaN or Inf".into()));
            }
            return Err(Error::NumericalBlowup { step: 0, sample: None });
        }
        Ok(())
    }

    fn run(&self, lay: &Layout, x: &[f64], t: f64, label: usize, act: &mut Activations) {
        let c = &self.config;
        let (d, h, nin) = (c.dim, c.hidden, c.input_dim());
        act.input[..d].copy_from_slice(x);
        time_features(t, &mut act.input[d..d + c.time_features]);
        let e = &self.data[lay.embed.clone()];
        act.input[d + c.time_features..].copy_from_slice(&e[label * c.cond_dim..(label + 1) * c.cond_dim]);

        dense(
            &self.data[lay.w1.clone()],
            &self.data[lay.b1.clone()],
            &act.input,
            nin,
            &mut act.h1,
        );
        act.h1.iter_mut().for_each(|v| *v = v.tanh());
        dense(
            &self.data[lay.w2.clone()],
            &self.data[lay.b2.clone()],
            &act.h1,
            h,
            &mut act.h2,
        );
        act.h2.iter_mut().for_each(|v| *v = v.tanh());
        dense(
            &self.data[lay.w3.clone()],
            &self.data[lay.b3.clone()],
            &act.h2,
            h,
            &mut act.out,
        );
    }

    /// Accumulates `dL/dtheta` into `grad` given `dL/dout` for one sample
    /// whose activations are in `act`.
    fn backward(
        &self,
        lay: &Layout,
        label: usize,
        act: &Activations,
        dout: &[f64],
        grad: &mut [f64],
        scratch: &mut Scratch,
    ) {
        let c = &self.config;
        let (d, h, nin) = (c.dim, c.hidden, c.input_dim());

        // Output layer.
        let w3 = &self.data[lay.w3.clone()];
        scratch.dh2.fill(0.0);
        for o in 0..d {
            let g = dout[o];
            if g == 0.0 {
                continue;
            }
            grad[lay.b3.start + o] += g;
            let row = lay.w3.start + o * h;
            for j in 0..h {
                grad[row + j] += g * act.h2[j];
                scratch.dh2[j] += w3[o * h + j] * g;
            }
        }
        // Second hidden layer.
        let w2 = &self.data[lay.w2.clone()];
        scratch.dh1.fill(0.0);
        for j in 0..h {
            let g = scratch.dh2[j] * (1.0 - act.h2[j] * act.h2[j]);
            grad[lay.b2.start + j] += g;
            let row = lay.w2.start + j * h;
            for k in 0..h {
                grad[row + k] += g * act.h1[k];
                scratch.dh1[k] += w2[j * h + k] * g;
            }
        }
        // First hidden layer; only the embedding slice of the input is trainable.
        let w1 = &self.data[lay.w1.clone()];
        let cond_at = d + c.time_features;
        let emb = lay.embed.start + label * c.cond_dim;
        for j in 0..h {
            let g = scratch.dh1[j] * (1.0 - act.h1[j] * act.h1[j]);
            grad[lay.b1.start + j] += g;
            let row = lay.w1.start + j * nin;
            for k in 0..nin {
                grad[row + k] += g * act.input[k];
            }
            for k in 0..c.cond_dim {
                grad[emb + k] += w1[j * nin + cond_at + k] * g;
            }
        }
    }
}

impl VectorField for MlpParams {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn velocity(&self, x: &[f64], t: f64, cond: Condition, out: &mut [f64]) -> Result<()> {
        self.forward_into(x, t, cond, out)
    }
}

/// `[sin(pi 2^j t), cos(pi 2^j t)]` for `j = 0 .. n/2`.
fn time_features(t: f64, out: &mut [f64]) {
    for (j, pair) in out.chunks_exact_mut(2).enumerate() {
        let w = PI * (1u64 << j) as f64;
        pair[0] = (w * t).sin();
        pair[1] = (w * t).cos();
    }
}

fn dense(w: &[f64], b: &[f64], input: &[f64], n_in: usize, out: &mut [f64]) {
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
        *o = bias + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>();
    }
}

struct Activations {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

impl Activations {
    fn new(c: &MlpConfig) -> Self {
        Self {
            input: vec![0.0; c.input_dim()],
            h1: vec![0.0; c.hidden],
            h2: vec![0.0; c.hidden],
            out: vec![0.0; c.dim],
        }
    }
}

struct Scratch {
    dh1: Vec<f64>,
    dh2: Vec<f64>,
    dout: Vec<f64>,
    xt: Vec<f64>,
}

/// One minibatch for the masked CFM objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainBatch {
    pub x1: Vec<Vec<f64>>,
    pub cond: Vec<Condition>,
    /// Per-sample 0/1 masks: 1 = predict, 0 = given.
    pub mask: Vec<Vec<f64>>,
}

impl TrainBatch {
    /// Unmasked batch: every coordinate is predicted.
    pub fn unmasked(x1: Vec<Vec<f64>>, cond: Vec<Condition>) -> Self {
        let mask = x1.iter().map(|x| vec![1.0; x.len()]).collect();
        Self { x1, cond, mask }
    }

    pub fn len(&self) -> usize {
        self.x1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x1.is_empty()
    }

    fn validate(&self, dim: usize, noise: &[Vec<f64>], t: &[f64]) -> Result<()> {
        let n = self.x1.len();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if self.cond.len() != n || self.mask.len() != n || noise.len() != n || t.len() != n {
            return Err(Error::invalid(format!(
                "batch size mismatch: x1 {n}, cond {}, mask {}, noise {}, t {}",
                self.cond.len(),
                self.mask.len(),
                noise.len(),
                t.len()
            )));
        }
        for b in 0..n {
            if self.x1[b].len() != dim || self.mask[b].len() != dim || noise[b].len() != dim {
                return Err(Error::invalid(format!("sample {b} does not have dimension {dim}")));
            }
            if self.mask[b].iter().any(|&m| m != 0.0 && m != 1.0) {
                return Err(Error::invalid(format!("sample {b} mask is not 0/1")));
            }
            if !(0.0..=1.0).contains(&t[b]) {
                return Err(Error::invalid(format!("sample {b} time {} outside [0, 1]", t[b])));
            }
        }
        Ok(())
    }
}

/// Masked CFM loss: the batch mean of `sum_i m_i (v_i(x_t, t, c) - (x1_i - x0_i))^2`
/// with `x_t = (1 - t) x0 + t x1`, where coordinates with `m_i = 0` are
/// replaced by their `x1` values before entering the network.
pub fn cfm_loss(params: &MlpParams, batch: &TrainBatch, noise: &[Vec<f64>], t: &[f64]) -> Result<f64> {
    loss_impl(params, batch, noise, t, None)
}

/// Exact gradient of [`cfm_loss`], laid out like the parameters.
pub fn grad(params: &MlpParams, batch: &TrainBatch, noise: &[Vec<f64>], t: &[f64]) -> Result<(f64, MlpParams)> {
    let mut g = MlpParams::zeros(params.config)?;
    let loss = loss_impl(params, batch, noise, t, Some(&mut g.data))?;
    Ok((loss, g))
}

fn loss_impl(
    params: &MlpParams,
    batch: &TrainBatch,
    noise: &[Vec<f64>],
    t: &[f64],
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    let c = &params.config;
    batch.validate(c.dim, noise, t)?;
    let lay = c.layout();
    let n = batch.len() as f64;
    let mut act = Activations::new(c);
    let mut scratch = Scratch {
        dh1: vec![0.0; c.hidden],
        dh2: vec![0.0; c.hidden],
        dout: vec![0.0; c.dim],
        xt: vec![0.0; c.dim],
    };
    let mut total = 0.0;
    for b in 0..batch.len() {
        let (x1, x0, m, tb) = (&batch.x1[b], &noise[b], &batch.mask[b], t[b]);
        for i in 0..c.dim {
            scratch.xt[i] = if m[i] == 0.0 {
                x1[i]
            } else {
                (1.0 - tb) * x0[i] + tb * x1[i]
            };
        }
        let label = params.label_index(batch.cond[b])?;
        params.run(&lay, &scratch.xt, tb, label, &mut act);
        for i in 0..c.dim {
            let r = m[i] * (act.out[i] - (x1[i] - x0[i]));
            total += r * r;
            scratch.dout[i] = 2.0 * m[i] * r / n;
        }
        if let Some(g) = grad.as_deref_mut() {
            let dout = std::mem::take(&mut scratch.dout);
            params.backward(&lay, label, &act, &dout, g, &mut scratch);
            scratch.dout = dout;
        }
    }
    let loss = total / n;
    if !loss.is_finite() && !params.is_finite() {
        return Err(Error::CorruptedModel("parameters contain NaN or Inf".into()));
    }
    Ok(loss)
}

/// Replaces the label by [`Condition::Null`] with probability `null_prob`.
pub fn draw_condition<R: Rng>(rng: &mut R, label: Option<u32>, null_prob: f64) -> Condition {
    let dropped = rng.random::<f64>() < null_prob;
    match label {
        Some(l) if !dropped => Condition::Label(l),
        _ => Condition::Null,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Probability of training a sample on the null label.
    pub null_prob: f64,
    /// Probability that a sample gets a random infilling mask instead of all ones.
    pub infill_prob: f64,
    pub hidden: usize,
    pub time_features: usize,
    pub cond_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 128,
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            null_prob: 0.1,
            infill_prob: 0.0,
            hidden: 128,
            time_features: 8,
            cond_dim: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, msg))
            }
        };
        check(self.batch_size >= 1, "batch_size", "must be >= 1")?;
        check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate",
            "must be positive",
        )?;
        check((0.0..1.0).contains(&self.beta1), "beta1", "must be in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2", "must be in [0, 1)")?;
        check(self.eps > 0.0, "eps", "must be positive")?;
        check((0.0..=1.0).contains(&self.null_prob), "null_prob", "must be in [0, 1]")?;
        check(
            (0.0..=1.0).contains(&self.infill_prob),
            "infill_prob",
            "must be in [0, 1]",
        )?;
        Ok(())
    }
}

/// Where training targets come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Fresh draws every step; the component index is the label.
    Mixture(GaussianMixture),
    /// A fixed sample set, resampled with replacement.
    Samples {
        points: Vec<Vec<f64>>,
        labels: Vec<Option<u32>>,
    },
}

impl DataSource {
    pub fn dim(&self) -> Result<usize> {
        match self {
            DataSource::Mixture(g) => Ok(g.dim()),
            DataSource::Samples { points, .. } => points
                .first()
                .map(Vec::len)
                .ok_or_else(|| Error::config("data", "sample set is empty")),
        }
    }

    pub fn n_labels(&self) -> usize {
        match self {
            DataSource::Mixture(g) => g.len(),
            DataSource::Samples { labels, .. } => labels.iter().flatten().max().map_or(0, |&l| l as usize + 1),
        }
    }

    fn validate(&self) -> Result<()> {
        if let DataSource::Samples { points, labels } = self {
            let d = self.dim()?;
            if d == 0 {
                return Err(Error::config("data", "samples have dimension 0"));
            }
            if labels.len() != points.len() {
                return Err(Error::config("data", "labels and points differ in length"));
            }
            if let Some(i) = points.iter().position(|p| p.len() != d) {
                return Err(Error::config("data", format!("sample {i} has wrong dimension")));
            }
        }
        Ok(())
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, Option<u32>) {
        match self {
            DataSource::Mixture(g) => {
                let (x, k) = g.draw(rng);
                (x, Some(k as u32))
            }
            DataSource::Samples { points, labels } => {
                let i = rng.random_range(0..points.len());
                (points[i].clone(), labels[i])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub params: MlpParams,
    /// Minibatch loss at every step.
    pub loss_curve: Vec<f64>,
}

/// Adam on the masked CFM loss. Single-threaded and deterministic per seed.
pub fn train(config: &TrainConfig, data: &DataSource) -> Result<TrainOutput> {
    config.validate()?;
    data.validate()?;
    let dim = data.dim()?;
    let net = MlpConfig {
        dim,
        hidden: config.hidden,
        time_features: config.time_features,
        n_labels: data.n_labels(),
        cond_dim: config.cond_dim,
    };
    let mut params = MlpParams::init(net, config.seed)?;
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut rng = stream_rng(config.seed, Stream::Train, 0);
    let mut loss_curve = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let (batch, noise, t) = make_batch(config, data, dim, &mut rng);
        let (loss, g) = grad(&params, &batch, &noise, &t)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        loss_curve.push(loss);

        let k = (step + 1) as i32;
        let c1 = 1.0 - config.beta1.powi(k);
        let c2 = 1.0 - config.beta2.powi(k);
        for (((p, gi), mi), vi) in params.data.iter_mut().zip(&g.data).zip(&mut m).zip(&mut v) {
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
            *p -= config.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + config.eps);
        }
        if !params.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
    }
    Ok(TrainOutput { params, loss_curve })
}

fn make_batch<R: Rng>(
    config: &TrainConfig,
    data: &DataSource,
    dim: usize,
    rng: &mut R,
) -> (TrainBatch, Vec<Vec<f64>>, Vec<f64>) {
    let n = config.batch_size;
    let mut x1 = Vec::with_capacity(n);
    let mut cond = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, label) = data.draw(rng);
        x1.push(x);
        cond.push(draw_condition(rng, label, config.null_prob));
        let mut m = vec![1.0; dim];
        if dim > 1 && rng.random::<f64>() < config.infill_prob {
            for mi in m.iter_mut() {
                *mi = if rng.random::<bool>() { 1.0 } else { 0.0 };
            }
            if m.iter().all(|&mi| mi == 0.0) {
                m[rng.random_range(0..dim)] = 1.0;
            }
        }
        mask.push(m);
        noise.push((0..dim).map(|_| rng.sample(StandardNormal)).collect());
        t.push(rng.random::<f64>());
    }
    (TrainBatch { x1, cond, mask }, noise, t)
}

/// Trailing moving average with the given window.
pub fn smoothed(curve: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(curve.len());
    let mut acc = 0.0;
    for (i, v) in curve.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= curve[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::oracle::sample_prior;

    fn tiny(n_labels: usize) -> MlpConfig {
        MlpConfig {
            dim: 2,
            hidden: 8,
            time_features: 4,
            n_labels,
            cond_dim: 3,
        }
    }

    fn random_problem(seed: u64, n: usize, masked: bool) -> (MlpParams, TrainBatch, Vec<Vec<f64>>, Vec<f64>) {
        let mut params = MlpParams::init(tiny(3), seed).unwrap();
        params.randomize_head(seed);
        let mut rng = stream_rng(seed, Stream::Train, 9);
        let x1 = GaussianMixture::toy().sample(n, seed).unwrap();
        let cond = (0..n)
            .map(|i| {
                if i % 4 == 0 {
                    Condition::Null
                } else {
                    Condition::Label((i % 3) as u32)
                }
            })
            .collect();
        let mask = (0..n)
            .map(|i| {
                if masked && i % 2 == 1 {
                    vec![1.0, 0.0]
                } else {
                    vec![1.0, 1.0]
                }
            })
            .collect();
        let noise = sample_prior(n, 2, seed + 100).unwrap();
        let t = (0..n).map(|_| rng.random::<f64>()).collect();
        (params, TrainBatch { x1, cond, mask }, noise, t)
    }

    /// Straight-line re-implementation of the loss, sharing no code with
    /// the network's forward pass.
    fn naive_loss(p: &MlpParams, batch: &TrainBatch, noise: &[Vec<f64>], t: &[f64]) -> f64 {
        let c = p.config;
        let (d, h, tf, cd) = (c.dim, c.hidden, c.time_features, c.cond_dim);
        let nin = d + tf + cd;
        let data = p.as_slice();
        let embed_len = (c.n_labels + 1) * cd;
        let w1 = &data[embed_len..embed_len + h * nin];
        let b1 = &data[embed_len + h * nin..embed_len + h * nin + h];
        let o2 = embed_len + h * nin + h;
        let w2 = &data[o2..o2 + h * h];
        let b2 = &data[o2 + h * h..o2 + h * h + h];
        let o3 = o2 + h * h + h;
        let w3 = &data[o3..o3 + d * h];
        let b3 = &data[o3 + d * h..o3 + d * h + d];
        let mut sum = 0.0;
        for b in 0..batch.x1.len() {
            let tb = t[b];
            let mut input = Vec::new();
            for i in 0..d {
                let xt = (1.0 - tb) * noise[b][i] + tb * batch.x1[b][i];
                input.push(if batch.mask[b][i] == 0.0 { batch.x1[b][i] } else { xt });
            }
            for j in 0..tf / 2 {
                let w = PI * 2f64.powi(j as i32);
                input.push((w * tb).sin());
                input.push((w * tb).cos());
            }
            let label = match batch.cond[b] {
                Condition::Null => c.n_labels,
                Condition::Label(l) => l as usize,
            };
            input.extend_from_slice(&data[label * cd..label * cd + cd]);
            let h1: Vec<f64> = (0..h)
                .map(|j| (b1[j] + (0..nin).map(|k| w1[j * nin + k] * input[k]).sum::<f64>()).tanh())
                .collect();
            let h2: Vec<f64> = (0..h)
                .map(|j| (b2[j] + (0..h).map(|k| w2[j * h + k] * h1[k]).sum::<f64>()).tanh())
                .collect();
            for i in 0..d {
                let v = b3[i] + (0..h).map(|k| w3[i * h + k] * h2[k]).sum::<f64>();
                let target = batch.x1[b][i] - noise[b][i];
                sum += batch.mask[b][i] * (v - target).powi(2);
            }
        }
        sum / batch.x1.len() as f64
    }

    #[test]
    fn zero_head_outputs_zero() {
        let p = MlpParams::init(MlpConfig::new(3, 2), 1).unwrap();
        for (x, t) in [([1.0, -2.0, 0.5], 0.1), ([0.0, 0.0, 9.0], 0.9)] {
            assert_eq!(p.forward(&x, t, Condition::Label(1)).unwrap(), vec![0.0; 3]);
        }
    }

    #[test]
    fn forward_is_deterministic_and_sensitive() {
        let (mut p, ..) = random_problem(3, 4, false);
        let x = [0.3, -0.8];
        let a = p.forward(&x, 0.4, Condition::Label(2)).unwrap();
        assert_eq!(a, p.forward(&x, 0.4, Condition::Label(2)).unwrap());
        // Nudge one first-layer weight: the output must move.
        let lay = p.config.layout();
        p.as_mut_slice()[lay.w1.start + 3] += 1e-3;
        let b = p.forward(&x, 0.4, Condition::Label(2)).unwrap();
        assert!(a.iter().zip(&b).map(|(u, v)| (u - v).abs()).sum::<f64>() > 0.0);
    }

    #[test]
    fn forward_errors() {
        let mut p = MlpParams::init(tiny(2), 0).unwrap();
        assert!(p.forward(&[0.0], 0.5, Condition::Null).is_err());
        assert!(p.forward(&[0.0, 0.0], 0.5, Condition::Label(2)).is_err());
        let lay = p.config.layout();
        p.as_mut_slice()[lay.b3.start] = f64::NAN;
        assert!(matches!(
            p.forward(&[0.0, 0.0], 0.5, Condition::Null),
            Err(Error::CorruptedModel(_))
        ));
    }

    #[test]
    fn loss_with_zero_head_is_mean_squared_displacement() {
        let (_, batch, noise, t) = random_problem(4, 16, false);
        let p = MlpParams::init(tiny(3), 4).unwrap();
        let want = batch
            .x1
            .iter()
            .zip(&noise)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
            .sum::<f64>()
            / 16.0;
        assert!((cfm_loss(&p, &batch, &noise, &t).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn zero_mask_annihilates_loss_and_gradient() {
        let (p, mut batch, noise, t) = random_problem(5, 8, false);
        batch.mask.iter_mut().for_each(|m| m.fill(0.0));
        assert_eq!(cfm_loss(&p, &batch, &noise, &t).unwrap(), 0.0);
        let (_, g) = grad(&p, &batch, &noise, &t).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_matches_naive_reimplementation() {
        for seed in 0..5 {
            for masked in [false, true] {
                let (p, batch, noise, t) = random_problem(seed, 12, masked);
                let fast = cfm_loss(&p, &batch, &noise, &t).unwrap();
                let slow = naive_loss(&p, &batch, &noise, &t);
                assert!((fast - slow).abs() < 1e-10 * slow.max(1.0), "{fast} vs {slow}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = 1e-4;
        for seed in 0..3 {
            let (p, batch, noise, t) = random_problem(seed, 6, seed % 2 == 1);
            let (_, g) = grad(&p, &batch, &noise, &t).unwrap();
            let mut q = p.clone();
            for i in 0..p.len() {
                let orig = q.as_slice()[i];
                q.as_mut_slice()[i] = orig + h;
                let up = cfm_loss(&q, &batch, &noise, &t).unwrap();
                q.as_mut_slice()[i] = orig - h;
                let down = cfm_loss(&q, &batch, &noise, &t).unwrap();
                q.as_mut_slice()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = g.as_slice()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "param {i}: analytic {a} vs fd {fd}");
            }
        }
    }

    fn twice<T: Clone>(v: &[T]) -> Vec<T> {
        v.iter().chain(v).cloned().collect()
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let (p, batch, noise, t) = random_problem(8, 5, true);
        let (l1, g1) = grad(&p, &batch, &noise, &t).unwrap();
        let big = TrainBatch {
            x1: twice(&batch.x1),
            cond: batch.cond.iter().chain(batch.cond.iter()).copied().collect(),
            mask: twice(&batch.mask),
        };
        let (l2, g2) = grad(&p, &big, &twice(&noise), &twice(&t)).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn shape_and_mask_validation() {
        let (p, mut batch, noise, t) = random_problem(1, 4, false);
        assert!(cfm_loss(&p, &batch, &noise[..3], &t).is_err());
        batch.mask[0][0] = 0.5;
        assert!(matches!(
            cfm_loss(&p, &batch, &noise, &t),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn null_dropout_fraction() {
        let p = 0.15;
        let n = 100_000;
        let mut rng = stream_rng(21, Stream::Train, 0);
        let nulls = (0..n)
            .filter(|_| draw_condition(&mut rng, Some(1), p) == Condition::Null)
            .count();
        let frac = nulls as f64 / n as f64;
        assert!((frac - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt(), "{frac}");
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let data = DataSource::Mixture(GaussianMixture::toy());
        let out = train(&cfg, &data).unwrap();
        let init = MlpParams::init(
            MlpConfig {
                n_labels: 2,
                ..MlpConfig::new(2, 2)
            },
            cfg.seed,
        )
        .unwrap();
        assert_eq!(out.params, init);
        assert!(out.loss_curve.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            steps: 30,
            batch_size: 16,
            hidden: 16,
            seed: 3,
            ..TrainConfig::default()
        };
        let data = DataSource::Mixture(GaussianMixture::toy());
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            steps: 200,
            batch_size: 8,
            hidden: 8,
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        let data = DataSource::Mixture(GaussianMixture::toy());
        assert!(matches!(train(&cfg, &data), Err(Error::TrainingDiverged { .. })));
    }

    #[test]
    fn smoothing() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
