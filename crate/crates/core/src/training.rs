//! Off-policy training with augmented R/P replay.
//!
//! The regular objective is the IPS loss `-r * Pi(a|X) / Pi_0(a|X)` averaged
//! over a batch of logged interactions. When an R/P dataset is supplied, each
//! regular batch is paired with `alpha` R/P samples drawn with replacement,
//! each replayed `beta` times with independent Gaussian noise on its hidden
//! representation and a reshaped reward (lowest for regressions, highest for
//! progressions). The two losses are mixed as `(1 - eta) * L0 + eta * L_RP`.
//!
//! All randomness comes from named streams keyed by the training seed, and
//! per-example terms are reduced in a fixed order, so results do not depend
//! on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Candidate, Dataset, LoggedInteraction, RpDataset, RpSample, SampleType};
use crate::error::{Error, Result};
use crate::metrics;
use crate::policy::PolicySnapshot;
use crate::rng::{self, counter2, Purpose};
use rand::seq::SliceRandom;
use rand::Rng;

/// Noise applied to one example's forward pass, drawn from the `Noise`
/// stream of `seed` at `counter`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDraw {
    pub scale: f64,
    pub seed: u64,
    pub counter: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct IpsExample<'a> {
    pub candidates: &'a [Candidate],
    pub action: usize,
    pub reward: f64,
    pub logging_propensity: f64,
    pub noise: Option<NoiseDraw>,
}

impl<'a> IpsExample<'a> {
    pub fn logged(x: &'a LoggedInteraction) -> Self {
        Self {
            candidates: &x.candidates,
            action: x.chosen_action,
            reward: x.reward,
            logging_propensity: x.logging_propensity,
            noise: None,
        }
    }
}

/// IPS objective with optional ratio clipping.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IpsLoss {
    /// Importance ratios above this cap contribute a constant term.
    pub clip: Option<f64>,
}

impl IpsLoss {
    fn term(&self, policy: &PolicySnapshot, ex: &IpsExample<'_>, grad: Option<&mut [f64]>, scale: f64) -> Result<f64> {
        if !(ex.logging_propensity > 0.0 && ex.logging_propensity <= 1.0) {
            return Err(Error::Invalid(format!(
                "logging propensity must be in (0,1], got {}",
                ex.logging_propensity
            )));
        }
        let trace = match ex.noise {
            Some(n) if n.scale > 0.0 => {
                let mut r = rng::stream(n.seed, Purpose::Noise, n.counter);
                policy.trace(ex.candidates, n.scale, Some(&mut r))?
            }
            _ => policy.trace(ex.candidates, 0.0, None)?,
        };
        if ex.action >= trace.propensities.len() {
            return Err(Error::Invalid(format!("action {} out of range", ex.action)));
        }
        let p = &trace.propensities;
        let pa = p[ex.action];
        let ratio = pa / ex.logging_propensity;
        let clipped = self.clip.is_some_and(|c| ratio > c);
        let ratio_used = if clipped { self.clip.unwrap_or(ratio) } else { ratio };
        let loss = -ex.reward * ratio_used;
        if let Some(g) = grad {
            if !clipped && ex.reward != 0.0 {
                // d(-r p_a / p0)/d s_i = -(r / p0) p_a (delta_ai - p_i)
                let k = -ex.reward / ex.logging_propensity * pa * scale;
                let d: Vec<f64> = p
                    .iter()
                    .enumerate()
                    .map(|(i, &pi)| k * (if i == ex.action { 1.0 } else { 0.0 } - pi))
                    .collect();
                policy.backprop(&trace, &d, g)?;
            }
        }
        Ok(loss)
    }

    pub fn value(&self, policy: &PolicySnapshot, batch: &[IpsExample<'_>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("loss batch"));
        }
        let terms = batch
            .par_iter()
            .map(|ex| self.term(policy, ex, None, 1.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(terms.iter().sum::<f64>() / batch.len() as f64)
    }

    /// Mean loss and its gradient with respect to the policy parameters.
    pub fn value_and_gradient(&self, policy: &PolicySnapshot, batch: &[IpsExample<'_>]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Empty("loss batch"));
        }
        let n = policy.parameters().len();
        let inv = 1.0 / batch.len() as f64;
        let terms = batch
            .par_iter()
            .map(|ex| {
                let mut g = vec![0.0; n];
                self.term(policy, ex, Some(&mut g), inv).map(|l| (l, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grad = vec![0.0; n];
        let mut total = 0.0;
        for (l, g) in &terms {
            total += l;
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
        if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: format!("gradient[{i}]"),
            });
        }
        Ok((total * inv, grad))
    }
}

impl PolicySnapshot {
    /// `grad_theta L` of an IPS loss over `batch`.
    pub fn gradient(&self, loss: &IpsLoss, batch: &[IpsExample<'_>]) -> Result<Vec<f64>> {
        loss.value_and_gradient(self, batch).map(|(_, g)| g)
    }
}

/// Unclipped IPS loss over logged interactions.
pub fn ips_loss(policy: &PolicySnapshot, batch: &[LoggedInteraction]) -> Result<f64> {
    let ex: Vec<IpsExample<'_>> = batch.iter().map(IpsExample::logged).collect();
    IpsLoss::default().value(policy, &ex)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardScale {
    pub min: f64,
    pub max: f64,
}

impl Default for RewardScale {
    fn default() -> Self {
        Self { min: -1.0, max: 1.0 }
    }
}

pub fn reshape_reward(sample: &RpSample, scale: RewardScale) -> f64 {
    match sample.sample_type {
        SampleType::Regression => scale.min,
        SampleType::Progression => scale.max,
    }
}

pub fn combined_loss(l0: f64, l_rp: f64, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    Ok((1.0 - eta) * l0 + eta * l_rp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedValue {
    pub l0: f64,
    pub l_rp: f64,
    pub l: f64,
    pub gradient: Vec<f64>,
}

/// `L = (1 - eta) * L0 + eta * L_RP` and its gradient.
pub fn combined_value_and_gradient(
    policy: &PolicySnapshot,
    loss: &IpsLoss,
    regular: &[IpsExample<'_>],
    replay: &[IpsExample<'_>],
    eta: f64,
) -> Result<CombinedValue> {
    check_eta(eta)?;
    let (l0, g0) = loss.value_and_gradient(policy, regular)?;
    let (l_rp, g_rp) = loss.value_and_gradient(policy, replay)?;
    let gradient = g0
        .iter()
        .zip(&g_rp)
        .map(|(a, b)| (1.0 - eta) * a + eta * b)
        .collect();
    Ok(CombinedValue {
        l0,
        l_rp,
        l: combined_loss(l0, l_rp, eta)?,
        gradient,
    })
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("eta must satisfy 0 < eta < 1, got {eta}")))
    }
}

/// One augmented replay of an R/P sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedRecord {
    pub uid: String,
    /// Position of the source sample in the ACTIVE pool.
    pub source: usize,
    pub augmentation: usize,
    pub reward: f64,
    pub noise: NoiseDraw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedRpBatch {
    pub records: Vec<AugmentedRecord>,
}

/// ACTIVE R/P samples with reshaped rewards, the source of replay batches.
#[derive(Debug, Clone)]
pub struct RpPool<'a> {
    samples: Vec<&'a RpSample>,
    rewards: Vec<f64>,
}

impl<'a> RpPool<'a> {
    pub fn new(rp: &'a RpDataset, scale: RewardScale) -> Self {
        let samples: Vec<&RpSample> = rp.active().collect();
        let rewards = samples.iter().map(|s| reshape_reward(s, scale)).collect();
        Self { samples, rewards }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Draws `alpha` sources with replacement and expands each into `beta`
    /// noisy replays: `sampleBatch` for training step `step`.
    pub fn sample_batch(&self, alpha: usize, beta: usize, noise_scale: f64, seed: u64, step: u64) -> AugmentedRpBatch {
        let mut records = Vec::with_capacity(alpha * beta);
        if self.samples.is_empty() {
            return AugmentedRpBatch { records };
        }
        let mut pick = rng::stream(seed, Purpose::RpSampling, step);
        let mut k = 0u64;
        for _ in 0..alpha {
            let source = pick.random_range(0..self.samples.len());
            for augmentation in 0..beta {
                records.push(AugmentedRecord {
                    uid: self.samples[source].uid.clone(),
                    source,
                    augmentation,
                    reward: self.rewards[source],
                    noise: NoiseDraw {
                        scale: noise_scale,
                        seed,
                        counter: counter2(step, k),
                    },
                });
                k += 1;
            }
        }
        AugmentedRpBatch { records }
    }

    pub fn examples<'b>(&'b self, batch: &AugmentedRpBatch) -> Vec<IpsExample<'b>> {
        batch
            .records
            .iter()
            .map(|r| {
                let x = &self.samples[r.source].interaction;
                IpsExample {
                    candidates: &x.candidates,
                    action: x.chosen_action,
                    reward: r.reward,
                    logging_propensity: x.logging_propensity,
                    noise: Some(r.noise),
                }
            })
            .collect()
    }
}

/// `L_RP` over an augmented batch.
pub fn rp_auxiliary_loss(policy: &PolicySnapshot, pool: &RpPool<'_>, batch: &AugmentedRpBatch, loss: &IpsLoss) -> Result<f64> {
    loss.value(policy, &pool.examples(batch))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    SgdMomentum,
    /// Adam with the usual (0.9, 0.999, 1e-8) constants.
    Adaptive,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<f64>,
    second: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, momentum: f64, n_params: usize) -> Self {
        Self {
            kind,
            learning_rate,
            momentum,
            velocity: vec![0.0; n_params],
            second: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::SgdMomentum => {
                for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
                    *v = self.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adaptive => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for (((p, m), s), g) in params
                    .iter_mut()
                    .zip(&mut self.velocity)
                    .zip(&mut self.second)
                    .zip(grad)
                {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *s = B2 * *s + (1.0 - B2) * g * g;
                    *p -= lr * (*m / c1) / ((*s / c2).sqrt() + EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Replay loss mix ratio.
    pub eta: f64,
    /// R/P samples per regular batch.
    pub alpha: usize,
    /// Augmentations per R/P sample.
    pub beta: usize,
    /// Noise scale on the hidden representation.
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub seed: u64,
    pub aux_reward_scale: RewardScale,
    /// IPS ratio cap; `None` disables clipping.
    pub ips_clip: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            eta: 0.2,
            alpha: 5,
            beta: 20,
            lambda: 2.0,
            batch_size: 256,
            epochs: 8,
            learning_rate: 0.05,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            seed: 0,
            aux_reward_scale: RewardScale::default(),
            ips_clip: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        check_eta(self.eta)?;
        if self.alpha == 0 || self.beta == 0 {
            return Err(Error::Config("alpha and beta must be >= 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if self.alpha * self.beta > self.batch_size {
            return Err(Error::Config(format!(
                "alpha * beta = {} exceeds batch_size {}",
                self.alpha * self.beta,
                self.batch_size
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0,1)".into()));
        }
        if let Some(c) = self.ips_clip {
            if !(c > 0.0) {
                return Err(Error::Config("ips_clip must be > 0".into()));
            }
        }
        if !(self.aux_reward_scale.min < self.aux_reward_scale.max) {
            return Err(Error::Config("aux_reward_scale must have min < max".into()));
        }
        Ok(())
    }

    pub fn loss(&self) -> IpsLoss {
        IpsLoss { clip: self.ips_clip }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(rename = "L0")]
    pub l0: f64,
    #[serde(rename = "L_RP")]
    pub l_rp: Option<f64>,
    #[serde(rename = "L")]
    pub l: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub version: crate::policy::PolicyVersion,
    pub mean_loss: f64,
    pub validation_replication: Option<f64>,
    pub validation_ips_reward: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// Snapshot at the end of each epoch.
    pub snapshots: Vec<PolicySnapshot>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// uids of every R/P sample replayed, in draw order.
    pub replayed_uids: Vec<String>,
    pub warnings: Vec<String>,
}

impl TrainingOutcome {
    pub fn final_policy(&self) -> &PolicySnapshot {
        self.snapshots.last().expect("at least one epoch")
    }
}

/// Runs the training loop. Without `rp` (or with no ACTIVE samples) the
/// objective is the regular IPS loss alone.
pub fn train(
    initial: &PolicySnapshot,
    data: &Dataset,
    rp: Option<&RpDataset>,
    config: &TrainingConfig,
    validation: Option<&Dataset>,
) -> Result<TrainingOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let mut warnings = Vec::new();
    let pool = rp.map(|d| RpPool::new(d, config.aux_reward_scale));
    let pool = match pool {
        Some(p) if p.is_empty() => {
            let w = "R/P dataset has no ACTIVE samples; training on the regular loss only".to_string();
            tracing::warn!("{w}");
            warnings.push(w);
            None
        }
        other => other,
    };

    let loss = config.loss();
    let mut params = initial.parameters().to_vec();
    let mut current = initial.clone().with_lineage_seed(config.seed);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, config.momentum, params.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut snapshots = Vec::new();
    let mut replayed_uids = Vec::new();
    let mut step: u64 = 0;

    for epoch in 0..config.epochs {
        let mut shuffle = rng::stream(config.seed, Purpose::BatchOrder, epoch as u64);
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let regular: Vec<IpsExample<'_>> = chunk
                .iter()
                .map(|&i| IpsExample::logged(&data.interactions[i]))
                .collect();
            let (l0, l, grad, l_rp) = match &pool {
                Some(pool) => {
                    let batch = pool.sample_batch(config.alpha, config.beta, config.lambda, config.seed, step);
                    replayed_uids.extend(batch.records.iter().filter(|r| r.augmentation == 0).map(|r| r.uid.clone()));
                    let c = combined_value_and_gradient(&current, &loss, &regular, &pool.examples(&batch), config.eta)?;
                    (c.l0, c.l, c.gradient, Some(c.l_rp))
                }
                None => {
                    let (l0, g0) = loss.value_and_gradient(&current, &regular)?;
                    (l0, l0, g0, None)
                }
            };
            let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            optimizer.step(&mut params, &grad);
            current = current.with_parameters(params.clone())?;
            steps.push(StepRecord {
                step,
                l0,
                l_rp,
                l,
                grad_norm,
            });
            epoch_loss += l;
            n_batches += 1;
            step += 1;
        }
        let (validation_replication, validation_ips_reward) = match validation {
            Some(v) if !v.is_empty() => (
                metrics::replication_rate(&current, v)?,
                Some(metrics::ips_expected_reward(&current, v)?),
            ),
            _ => (None, None),
        };
        tracing::debug!(epoch, mean_loss = epoch_loss / n_batches as f64, "epoch done");
        epochs.push(EpochRecord {
            epoch,
            version: current.version(),
            mean_loss: epoch_loss / n_batches as f64,
            validation_replication,
            validation_ips_reward,
        });
        snapshots.push(current.clone());
    }
    Ok(TrainingOutcome {
        snapshots,
        steps,
        epochs,
        replayed_uids,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Activation, PolicyArchitecture};

    fn x(features: &[[f64; 2]], action: usize, reward: f64, p0: f64) -> LoggedInteraction {
        LoggedInteraction {
            context_id: "ctx".into(),
            candidates: features
                .iter()
                .enumerate()
                .map(|(i, f)| Candidate {
                    candidate_id: format!("c{i}"),
                    features: f.to_vec(),
                })
                .collect(),
            chosen_action: action,
            logging_propensity: p0,
            reward,
        }
    }

    fn tiny() -> PolicySnapshot {
        PolicySnapshot::initialize_random(PolicyArchitecture::new(2, vec![3], Activation::Tanh), 5, true).unwrap()
    }

    #[test]
    fn ratio_one_gives_minus_one() {
        let p = PolicySnapshot::zeros(PolicyArchitecture::new(2, vec![3], Activation::Tanh)).unwrap();
        let batch = vec![x(&[[0.0, 1.0], [1.0, 0.0]], 0, 1.0, 0.5), x(&[[0.0, 1.0], [1.0, 0.0]], 1, 1.0, 0.5)];
        assert!((ips_loss(&p, &batch).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_reward_zero_loss_and_gradient() {
        let p = tiny();
        let batch = vec![x(&[[0.3, 1.0], [1.0, -0.2]], 0, 0.0, 0.5)];
        assert_eq!(ips_loss(&p, &batch).unwrap(), 0.0);
        let ex: Vec<_> = batch.iter().map(IpsExample::logged).collect();
        assert!(p.gradient(&IpsLoss::default(), &ex).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_sample_arithmetic() {
        // Two candidates with scores differing by ln 4 give (0.8, 0.2).
        let arch = PolicyArchitecture::new(1, vec![1], Activation::Relu);
        // hidden = relu(1 * x), score = 1 * hidden
        let p = PolicySnapshot::from_parameters(arch, vec![1.0, 0.0, 1.0, 0.0], Default::default(), vec![]).unwrap();
        let mut inter = LoggedInteraction {
            context_id: "c".into(),
            candidates: vec![
                Candidate { candidate_id: "a".into(), features: vec![4f64.ln()] },
                Candidate { candidate_id: "b".into(), features: vec![0.0] },
            ],
            chosen_action: 0,
            logging_propensity: 0.4,
            reward: 0.5,
        };
        assert!((p.propensities(&inter.candidates).unwrap()[0] - 0.8).abs() < 1e-15);
        assert!((ips_loss(&p, &[inter.clone()]).unwrap() + 1.0).abs() < 1e-12);
        inter.logging_propensity = 0.0;
        assert!(ips_loss(&p, &[inter]).is_err());
    }

    #[test]
    fn duplicated_sample_gradient_equals_single() {
        let p = tiny();
        let a = x(&[[0.3, 1.0], [1.0, -0.2], [0.1, 0.1]], 2, 0.7, 0.3);
        let one = p.gradient(&IpsLoss::default(), &[IpsExample::logged(&a)]).unwrap();
        let two = p
            .gradient(&IpsLoss::default(), &[IpsExample::logged(&a), IpsExample::logged(&a)])
            .unwrap();
        for (u, v) in one.iter().zip(&two) {
            assert!((u - v).abs() <= 1e-15 * u.abs().max(1.0));
        }
    }

    #[test]
    fn clipping_freezes_the_term() {
        let p = tiny();
        let a = x(&[[0.3, 1.0], [1.0, -0.2]], 0, 1.0, 0.01);
        let loss = IpsLoss { clip: Some(2.0) };
        let (l, g) = loss.value_and_gradient(&p, &[IpsExample::logged(&a)]).unwrap();
        assert_eq!(l, -2.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reshaped_rewards() {
        let mut s = crate::domain::RpSample {
            uid: "u".into(),
            incident_id: "i".into(),
            sample_type: SampleType::Regression,
            severity: crate::domain::Severity::new(1).unwrap(),
            reported_date: chrono::NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
            lifecycle_status: crate::domain::LifecycleStatus::Active,
            description: String::new(),
            interaction: x(&[[0.0, 0.0]], 0, 0.0, 1.0),
        };
        assert_eq!(reshape_reward(&s, RewardScale::default()), -1.0);
        s.sample_type = SampleType::Progression;
        assert_eq!(reshape_reward(&s, RewardScale::default()), 1.0);
        assert_eq!(reshape_reward(&s, RewardScale { min: 0.0, max: 1.0 }), 1.0);
    }

    #[test]
    fn combined_loss_contract() {
        assert!((combined_loss(-1.0, 1.0, 0.2).unwrap() + 0.6).abs() < 1e-15);
        assert_eq!(combined_loss(0.3, 0.3, 0.7).unwrap(), 0.3);
        assert!((combined_loss(-1.0, 1.0, 1e-9).unwrap() + 1.0).abs() < 1e-8);
        for bad in [0.0, 1.0, -0.1, 1.5] {
            assert!(matches!(combined_loss(0.0, 0.0, bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        let bad = TrainingConfig { batch_size: 50, ..TrainingConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainingConfig { lambda: -1.0, ..TrainingConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainingConfig { eta: 1.0, ..TrainingConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let err = train(&tiny(), &Dataset::default(), None, &TrainingConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::Empty(_)));
    }

    #[test]
    fn momentum_and_adam_move_against_gradient() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::SgdMomentum, OptimizerKind::Adaptive] {
            let mut opt = Optimizer::new(kind, 0.1, 0.9, 2);
            let mut p = vec![1.0, -1.0];
            opt.step(&mut p, &[1.0, -1.0]);
            assert!(p[0] < 1.0 && p[1] > -1.0, "{kind:?}");
        }
    }
}
