//! PPO-clip on the gating network, one-step bandit episodes.
//!
//! State is the query vector, the action is the top-1 routed expert and the
//! reward comes from reviewer feedback. The advantage is `R - baseline` where
//! the baseline is the mean reward of the previous batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{check_dim, Vector};
use crate::error::{Error, Result};
use crate::moe::{ExpertId, GatingDistribution, GatingNetwork};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub clip: f64,
    /// Buffer size that triggers an update.
    pub batch_threshold: usize,
    /// Allows a threshold outside 100..=200.
    pub allow_any_batch: bool,
    pub epochs: usize,
    /// Fewest buffered records before a plateau can trigger an update.
    pub plateau_min_records: usize,
    /// Relative gap between half-window means that counts as a plateau.
    pub plateau_tolerance: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            clip: 0.2,
            batch_threshold: 128,
            allow_any_batch: false,
            epochs: 4,
            plateau_min_records: 50,
            plateau_tolerance: 0.01,
            seed: 42,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Configuration(format!(
                "clip must be in (0, 1), got {}",
                self.clip
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Configuration(
                "learning rate must be positive".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::Configuration("epochs must be positive".into()));
        }
        if self.batch_threshold == 0
            || (!self.allow_any_batch && !(100..=200).contains(&self.batch_threshold))
        {
            return Err(Error::Configuration(format!(
                "batch threshold {} outside 100..=200 (set allow_any_batch to override)",
                self.batch_threshold
            )));
        }
        if !(self.plateau_tolerance >= 0.0) {
            return Err(Error::Configuration(
                "plateau tolerance must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Trajectory<T> {
    pub query: Vector<T>,
    /// Gate output when the action was taken.
    pub old_probs: GatingDistribution<T>,
    pub action: ExpertId,
    pub reward: T,
}

/// The trainable routing policy together with its reward baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PolicyState<T> {
    pub gate: GatingNetwork<T>,
    pub baseline: T,
}

impl<T: Scalar> PolicyState<T> {
    pub fn new(gate: GatingNetwork<T>) -> Self {
        Self {
            gate,
            baseline: T::zero(),
        }
    }
}

/// Gradient with the same layout as the gate parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct UpdateReport<T> {
    pub state: PolicyState<T>,
    /// Surrogate value at the start of each epoch.
    pub objectives: Vec<f64>,
    pub mean_reward: f64,
    /// Share of samples whose ratio was clipped in the last epoch.
    pub clip_fraction: f64,
    pub batch_size: usize,
}

pub fn sample_action<T: Scalar, R: Rng + ?Sized>(
    g: &GatingDistribution<T>,
    rng: &mut R,
) -> ExpertId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in g.probs.iter().enumerate() {
        acc += p.to_f64_lossy();
        if u < acc {
            return ExpertId::from_index(i);
        }
    }
    ExpertId::from_index(g.len() - 1)
}

fn check_trajectory<T: Scalar>(net: &GatingNetwork<T>, t: &Trajectory<T>) -> Result<()> {
    check_dim(net.dim(), t.query.dim())?;
    check_dim(net.experts(), t.old_probs.len())?;
    if t.action.0 == 0 || t.action.0 > net.experts() {
        return Err(Error::Validation(format!(
            "action {} outside the expert set",
            t.action
        )));
    }
    let p = t.old_probs.prob(t.action);
    if !(p.is_finite() && p > T::zero()) || !t.reward.is_finite() {
        return Err(Error::Validation(
            "trajectory needs a positive old probability and a finite reward".into(),
        ));
    }
    Ok(())
}

/// Per-sample surrogate value and its derivative with respect to the logits
/// (`None` when the sample is clipped and contributes no gradient).
fn sample_terms<T: Scalar>(
    net: &GatingNetwork<T>,
    t: &Trajectory<T>,
    baseline: T,
    clip: T,
) -> Result<(T, Option<Vec<T>>)> {
    let pi = net.gate(&t.query)?.probs;
    let a = t.action.index();
    let ratio = pi[a] / t.old_probs.probs[a];
    let adv = t.reward - baseline;
    let clipped = ratio.max(T::one() - clip).min(T::one() + clip);
    let value = (ratio * adv).min(clipped * adv);
    let active = if adv > T::zero() {
        ratio < T::one() + clip
    } else if adv < T::zero() {
        ratio > T::one() - clip
    } else {
        false
    };
    if !active {
        return Ok((value, None));
    }
    // d ratio / d z_j = ratio * ([j == a] - pi_j)
    let dz = pi
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let ind = if j == a { T::one() } else { T::zero() };
            adv * ratio * (ind - p)
        })
        .collect();
    Ok((value, Some(dz)))
}

/// Mean clipped surrogate over the batch.
pub fn clipped_surrogate<T: Scalar>(
    net: &GatingNetwork<T>,
    batch: &[Trajectory<T>],
    baseline: T,
    clip: T,
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::Validation("empty trajectory batch".into()));
    }
    let mut total = T::zero();
    for t in batch {
        check_trajectory(net, t)?;
        total += sample_terms(net, t, baseline, clip)?.0;
    }
    Ok(total / T::lit(batch.len() as f64))
}

/// Analytic gradient of [`clipped_surrogate`] with respect to `W` and `b`.
pub fn surrogate_gradient<T: Scalar>(
    net: &GatingNetwork<T>,
    batch: &[Trajectory<T>],
    baseline: T,
    clip: T,
) -> Result<PolicyGradient<T>> {
    Ok(gradient_and_clip_count(net, batch, baseline, clip)?.0)
}

fn gradient_and_clip_count<T: Scalar>(
    net: &GatingNetwork<T>,
    batch: &[Trajectory<T>],
    baseline: T,
    clip: T,
) -> Result<(PolicyGradient<T>, usize)> {
    if batch.is_empty() {
        return Err(Error::Validation("empty trajectory batch".into()));
    }
    let (n, d) = (net.experts(), net.dim());
    let mut g = PolicyGradient {
        weights: vec![T::zero(); n * d],
        bias: vec![T::zero(); n],
    };
    let scale = T::one() / T::lit(batch.len() as f64);
    let mut clipped = 0;
    for t in batch {
        check_trajectory(net, t)?;
        let Some(dz) = sample_terms(net, t, baseline, clip)?.1 else {
            if t.reward != baseline {
                clipped += 1;
            }
            continue;
        };
        let v = t.query.as_slice();
        for j in 0..n {
            let c = dz[j] * scale;
            if c == T::zero() {
                continue;
            }
            g.bias[j] += c;
            for (w, &x) in g.weights[j * d..(j + 1) * d].iter_mut().zip(v) {
                *w += c * x;
            }
        }
    }
    Ok((g, clipped))
}

/// Runs `cfg.epochs` gradient-ascent steps on the clipped surrogate. The old
/// probabilities stored in each trajectory stay fixed across epochs.
///
/// Returns a new state; `state` itself is never modified, so an aborted update
/// leaves the caller's policy untouched.
pub fn ppo_update<T: Scalar>(
    state: &PolicyState<T>,
    batch: &[Trajectory<T>],
    cfg: &PpoConfig,
) -> Result<UpdateReport<T>> {
    if batch.is_empty() {
        return Err(Error::Validation("empty trajectory batch".into()));
    }
    if !(cfg.clip > 0.0 && cfg.clip < 1.0) || cfg.epochs == 0 {
        return Err(Error::Configuration("invalid PPO configuration".into()));
    }
    let clip = T::lit(cfg.clip);
    let lr = T::lit(cfg.learning_rate);
    let mut net = state.gate.clone();
    let mut objectives = Vec::with_capacity(cfg.epochs);
    let mut clip_fraction = 0.0;
    for epoch in 0..cfg.epochs {
        objectives.push(clipped_surrogate(&net, batch, state.baseline, clip)?.to_f64_lossy());
        let (grad, clipped) = gradient_and_clip_count(&net, batch, state.baseline, clip)?;
        clip_fraction = clipped as f64 / batch.len() as f64;
        if grad
            .weights
            .iter()
            .chain(&grad.bias)
            .any(|x| !x.is_finite())
        {
            tracing::error!(epoch, "non-finite policy gradient, update aborted");
            return Err(Error::UpdateAborted(format!(
                "non-finite gradient in epoch {epoch}"
            )));
        }
        let (w, b) = net.params_mut();
        for (p, g) in w
            .iter_mut()
            .zip(&grad.weights)
            .chain(b.iter_mut().zip(&grad.bias))
        {
            if *g != T::zero() {
                *p += lr * *g;
            }
        }
        if net.check_finite().is_err() {
            tracing::error!(epoch, "non-finite policy parameters, update aborted");
            return Err(Error::UpdateAborted(format!(
                "non-finite parameters after epoch {epoch}"
            )));
        }
    }
    let mean: T = batch.iter().map(|t| t.reward).sum::<T>() / T::lit(batch.len() as f64);
    net.version = state.gate.version + 1;
    Ok(UpdateReport {
        state: PolicyState {
            gate: net,
            baseline: mean,
        },
        objectives,
        mean_reward: mean.to_f64_lossy(),
        clip_fraction,
        batch_size: batch.len(),
    })
}

/// True once the buffer reaches the batch threshold, or once it holds at least
/// `plateau_min_records` rewards whose two halves have nearly equal means.
pub fn should_update(rewards: &[f64], cfg: &PpoConfig) -> bool {
    let n = rewards.len();
    if n >= cfg.batch_threshold {
        return true;
    }
    if n < cfg.plateau_min_records.max(2) {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, second) = rewards.split_at(n / 2);
    let (m1, m2) = (mean(first), mean(second));
    let scale = m1.abs().max(m2.abs());
    let rel = if scale == 0.0 {
        0.0
    } else {
        (m2 - m1).abs() / scale
    };
    rel < cfg.plateau_tolerance
}
