//! Self-paced learning.
//!
//! Training alternates between two blocks of the joint objective
//!
//! ```text
//! E(w, v) = sum_i v_i L_i(w) + lambda * sum_i (v_i^q / q - v_i),   v in [0, 1]^n
//! ```
//!
//! The `v` block is separable and has the closed form implemented by
//! [`spl_weight`]; the `w` block is one epoch of mini-batch descent on
//! `sum_i v_i L_i` with `v` frozen. Between epochs the pace parameter
//! `lambda` grows geometrically and the exponent `q` decays towards 1, which
//! moves the weighting from soft towards hard admission.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, Var};
use crate::blocks::FprCnn;
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn check_pace(lambda: f64, q: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() && lambda != f64::INFINITY {
        return Err(Error::invalid(format!("lambda must be > 0, got {lambda}")));
    }
    if !(q > 1.0) || !q.is_finite() {
        return Err(Error::invalid(format!("q must be a finite value > 1, got {q}")));
    }
    Ok(())
}

/// Minimizer over `v in [0, 1]` of `v * loss + lambda * (v^q / q - v)`.
pub fn spl_weight(loss: f64, lambda: f64, q: f64) -> Result<f64> {
    check_pace(lambda, q)?;
    if !loss.is_finite() || loss < 0.0 {
        return Err(Error::invalid(format!("loss must be finite and >= 0, got {loss}")));
    }
    Ok(if loss <= 0.0 {
        1.0
    } else if loss >= lambda {
        0.0
    } else {
        (1.0 - loss / lambda).powf(1.0 / (q - 1.0))
    })
}

/// The `v` block of the alternating minimization: [`spl_weight`] per sample.
pub fn v_step(losses: &[f64], lambda: f64, q: f64) -> Result<Vec<f64>> {
    losses.iter().map(|&l| spl_weight(l, lambda, q)).collect()
}

/// `sum_i v_i L_i + lambda * sum_i (v_i^q / q - v_i)`.
pub fn spl_objective(losses: &[f64], v: &[f64], lambda: f64, q: f64) -> Result<f64> {
    if losses.len() != v.len() {
        return Err(Error::shape(
            "spl_objective",
            format!("{} losses vs {} weights", losses.len(), v.len()),
        ));
    }
    check_pace(lambda, q)?;
    if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::invalid(format!("weight {bad} outside [0, 1]")));
    }
    let fit: f64 = losses.iter().zip(v).map(|(l, w)| w * l).sum();
    let reg: f64 = v.iter().map(|w| w.powf(q) / q - w).sum();
    Ok(fit + lambda * reg)
}

/// Initial value of the pace parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lambda0 {
    Value(f64),
    /// The given percentile (0..=100) of the losses seen at the first epoch.
    Percentile(f64),
}

impl fmt::Display for Lambda0 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lambda0::Value(v) => write!(f, "{v}"),
            Lambda0::Percentile(p) => write!(f, "percentile:{p}"),
        }
    }
}

impl FromStr for Lambda0 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(p) = s.strip_prefix("percentile:") {
            let p: f64 = p
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad percentile `{p}`")))?;
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
            }
            Ok(Lambda0::Percentile(p))
        } else {
            let v: f64 = s.parse().map_err(|_| Error::invalid(format!("bad lambda0 `{s}`")))?;
            if !(v > 0.0) {
                return Err(Error::invalid("lambda0 must be > 0"));
            }
            Ok(Lambda0::Value(v))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplSchedule {
    pub lambda0: Lambda0,
    /// Geometric growth factor of lambda per epoch, > 1.
    pub gamma: f64,
    pub q0: f64,
    /// Decay of `q - 1` per epoch, in (0, 1).
    pub mu: f64,
    pub q_min: f64,
}

impl Default for SplSchedule {
    fn default() -> Self {
        Self {
            lambda0: Lambda0::Percentile(60.0),
            gamma: 1.15,
            q0: 2.0,
            mu: 0.9,
            q_min: 1.05,
        }
    }
}

impl SplSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 1.0) {
            return Err(Error::invalid("spl gamma must be > 1"));
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::invalid("spl mu must be in (0, 1)"));
        }
        if !(self.q_min > 1.0 && self.q_min <= self.q0) {
            return Err(Error::invalid("spl needs 1 < q_min <= q0"));
        }
        Ok(())
    }

    /// `max(q_min, 1 + (q0 - 1) * mu^t)`.
    pub fn q_at(&self, t: usize) -> f64 {
        (1.0 + (self.q0 - 1.0) * self.mu.powi(t as i32)).max(self.q_min)
    }
}

/// Linear-interpolation percentile of unsorted data.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplState {
    /// Per-sample weights from the most recent v-step.
    pub v: Vec<f64>,
    /// `None` until resolved from the first epoch's losses.
    pub lambda: Option<f64>,
    pub q: f64,
    pub t: usize,
    pub schedule: SplSchedule,
}

impl SplState {
    pub fn new(schedule: SplSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            v: Vec::new(),
            lambda: match schedule.lambda0 {
                Lambda0::Value(v) => Some(v),
                Lambda0::Percentile(_) => None,
            },
            q: schedule.q0,
            t: 0,
            schedule,
        })
    }

    /// Fix lambda from the first losses when the schedule asks for a percentile.
    pub fn resolve_lambda(&mut self, losses: &[f64]) -> Result<f64> {
        if let Some(l) = self.lambda {
            return Ok(l);
        }
        let Lambda0::Percentile(p) = self.schedule.lambda0 else {
            unreachable!("value schedules are resolved at construction")
        };
        // A zero percentile would exclude every positive-loss sample.
        let l = percentile(losses, p)?.max(f64::MIN_POSITIVE);
        self.lambda = Some(l);
        Ok(l)
    }
}

/// `lambda <- lambda * gamma`, `q <- q(t + 1)`, `t <- t + 1`.
pub fn pace_update(state: &SplState) -> SplState {
    let mut next = state.clone();
    next.lambda = state.lambda.map(|l| l * state.schedule.gamma);
    next.t = state.t + 1;
    next.q = state.schedule.q_at(next.t);
    next
}

/// Samples with class labels; `inputs` has the sample index as leading axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().first() != Some(&labels.len()) {
            return Err(Error::shape(
                "labeled set",
                format!("{:?} inputs for {} labels", inputs.shape(), labels.len()),
            ));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> LabeledSet {
        LabeledSet {
            inputs: self.inputs.gather_batch(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

/// A model producing one loss per sample.
pub trait SampleLossModel {
    fn sample_losses(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: Var,
        labels: &[usize],
        mode: Mode,
    ) -> Result<Var>;
}

impl SampleLossModel for FprCnn {
    fn sample_losses(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: Var,
        labels: &[usize],
        mode: Mode,
    ) -> Result<Var> {
        let logits = self.forward(g, store, inputs, mode)?;
        g.softmax_cross_entropy(logits, labels)
    }
}

/// Eval-mode per-sample losses, evaluated in chunks.
pub fn evaluate_losses<M: SampleLossModel>(model: &M, store: &ParamStore, data: &LabeledSet) -> Result<Vec<f64>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let mut g = Graph::new();
        let x = g.constant(data.inputs.slice_batch(start, end));
        let l = model.sample_losses(&mut g, store, x, &data.labels[start..end], Mode::Eval)?;
        out.extend_from_slice(g.value(l).data());
    }
    Ok(out)
}

/// Shuffled mini-batches over the samples with positive weight.
///
/// The permutation depends only on the seed and the number of active
/// samples, and a trailing batch of one is merged into its predecessor
/// (train-mode batch norm needs two samples).
pub fn active_batches(weights: &[f64], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut active: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    active.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = active.chunks(batch_size.max(2)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("checked non-empty");
        batches.last_mut().expect("more than one batch").extend(last);
    }
    batches
}

/// One pass of mini-batch descent on `sum_i v_i L_i / (active samples in batch)`.
///
/// Returns the mean weighted batch loss.
pub fn weighted_epoch<M: SampleLossModel, O: Optimizer + ?Sized>(
    model: &M,
    store: &mut ParamStore,
    data: &LabeledSet,
    weights: &[f64],
    optimizer: &mut O,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    if weights.len() != data.len() {
        return Err(Error::shape("weighted_epoch", "one weight per sample required"));
    }
    let batches = active_batches(weights, batch_size, seed);
    let mut total = 0.0;
    for rows in &batches {
        let batch = data.subset(rows);
        let w: Vec<f64> = rows.iter().map(|&r| weights[r]).collect();
        let mut g = Graph::new();
        let x = g.constant(batch.inputs);
        let losses = model.sample_losses(&mut g, store, x, &batch.labels, Mode::Train)?;
        let s = g.weighted_sum(losses, &w)?;
        let loss = g.scale(s, 1.0 / rows.len() as f64);
        total += g.value(loss).data()[0];
        g.backward(loss)?;
        let grads = g.param_grads();
        store.apply_buffer_updates(g.take_buffer_updates())?;
        optimizer.step(store, &grads)?;
    }
    Ok(if batches.is_empty() {
        0.0
    } else {
        total / batches.len() as f64
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lambda: f64,
    pub q: f64,
    pub mean_loss: f64,
    pub active_fraction: f64,
}

pub const EPOCH_STATS_HEADER: &str = "epoch,lambda,q,mean_loss,active_fraction";

impl EpochStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.lambda, self.q, self.mean_loss, self.active_fraction
        )
    }
}

/// One self-paced epoch: losses under the frozen model, v-step, a weighted
/// descent pass, then the pace update. `state` ends up holding the weights
/// used in this epoch and the pace for the next one.
pub fn spl_train_epoch<M: SampleLossModel, O: Optimizer + ?Sized>(
    model: &M,
    store: &mut ParamStore,
    data: &LabeledSet,
    state: &mut SplState,
    optimizer: &mut O,
    batch_size: usize,
    seed: u64,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::invalid("self-paced epoch on an empty dataset"));
    }
    let losses = evaluate_losses(model, store, data)?;
    let lambda = state.resolve_lambda(&losses)?;
    let v = v_step(&losses, lambda, state.q)?;
    let active = v.iter().filter(|&&w| w > 0.0).count();
    if active == 0 {
        return Err(Error::EmptyCurriculum { lambda });
    }
    weighted_epoch(model, store, data, &v, optimizer, batch_size, seed)?;
    let stats = EpochStats {
        epoch: state.t,
        lambda,
        q: state.q,
        mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
        active_fraction: active as f64 / data.len() as f64,
    };
    state.v = v;
    *state = pace_update(state);
    Ok(stats)
}
