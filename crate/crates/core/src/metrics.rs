//! Remediation, replication and expected-reward metrics, and paired
//! bootstrap comparison of two policies.

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, SampleType};
use crate::error::{Error, Result};
use crate::evaluation::{EvaluationReport, SampleStatus};
use crate::policy::{argmax_action, PolicySnapshot};
use crate::rng::{self, Purpose};

/// Largest reward a logged interaction can carry.
pub const MAX_REWARD: f64 = 1.0;

pub const DEFAULT_RESAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RemediationValue {
    Percent(f64),
    /// The baseline had no failures, so the ratio is undefined.
    NoFailures,
}

impl RemediationValue {
    pub fn percent(self) -> Option<f64> {
        match self {
            Self::Percent(p) => Some(p),
            Self::NoFailures => None,
        }
    }
}

impl std::fmt::Display for RemediationValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Percent(p) => write!(f, "{p:.2}%"),
            Self::NoFailures => f.write_str("no-failures"),
        }
    }
}

fn remediation_from_counts(fail_baseline: usize, fail_new: usize) -> RemediationValue {
    if fail_baseline == 0 {
        RemediationValue::NoFailures
    } else {
        RemediationValue::Percent(100.0 * (fail_baseline as f64 - fail_new as f64) / fail_baseline as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Remediation {
    pub overall: RemediationValue,
    pub regression: RemediationValue,
    pub progression: RemediationValue,
    pub fail_baseline: usize,
    pub fail_new: usize,
}

/// `100 * (fail_baseline - fail_new) / fail_baseline`, overall and per type.
/// Can be negative when the new policy fails more often.
pub fn remediation_percentage(baseline: &EvaluationReport, new: &EvaluationReport) -> Result<Remediation> {
    let uids = |r: &EvaluationReport| r.rows.iter().map(|e| e.uid.clone()).collect::<BTreeSet<_>>();
    if baseline.rows.len() != new.rows.len() || uids(baseline) != uids(new) {
        return Err(Error::UidMismatch);
    }
    let fails = |r: &EvaluationReport, t: Option<SampleType>| {
        r.rows
            .iter()
            .filter(|e| e.status == SampleStatus::Fail && t.is_none_or(|t| e.sample_type == t))
            .count()
    };
    let value = |t| remediation_from_counts(fails(baseline, t), fails(new, t));
    Ok(Remediation {
        overall: value(None),
        regression: value(Some(SampleType::Regression)),
        progression: value(Some(SampleType::Progression)),
        fail_baseline: fails(baseline, None),
        fail_new: fails(new, None),
    })
}

/// Per-interaction 0/1 indicator of the argmax matching the logged action.
pub fn replication_indicators(policy: &PolicySnapshot, data: &Dataset) -> Result<Vec<f64>> {
    data.interactions
        .par_iter()
        .map(|x| {
            let p = policy.propensities(&x.candidates)?;
            Ok(if argmax_action(&p)? == x.chosen_action { 1.0 } else { 0.0 })
        })
        .collect()
}

/// Percentage of interactions replicated; `None` for an empty dataset.
pub fn replication_rate(policy: &PolicySnapshot, data: &Dataset) -> Result<Option<f64>> {
    if data.is_empty() {
        return Ok(None);
    }
    let v = replication_indicators(policy, data)?;
    Ok(Some(100.0 * mean(&v)))
}

/// Per-interaction IPS terms `r * Pi(a|X) / Pi_0(a|X)`.
pub fn ips_terms(policy: &PolicySnapshot, data: &Dataset) -> Result<Vec<f64>> {
    data.interactions
        .par_iter()
        .map(|x| {
            if !(x.logging_propensity > 0.0) {
                return Err(Error::Invalid(format!(
                    "logging propensity of `{}` must be > 0",
                    x.context_id
                )));
            }
            let p = policy.propensities(&x.candidates)?;
            let pa = p
                .get(x.chosen_action)
                .ok_or_else(|| Error::Invalid(format!("action {} out of range", x.chosen_action)))?;
            Ok(x.reward * pa / x.logging_propensity)
        })
        .collect()
}

/// IPS estimate of the policy's expected reward as a percentage of
/// [`MAX_REWARD`].
pub fn ips_expected_reward(policy: &PolicySnapshot, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(100.0 * mean(&ips_terms(policy, data)?) / MAX_REWARD)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: DEFAULT_RESAMPLES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub n: usize,
    pub baseline_mean: f64,
    pub new_mean: f64,
    /// `new_mean - baseline_mean`.
    pub delta: f64,
    /// `delta / |baseline_mean|`; `None` when the baseline mean is zero.
    pub relative_delta: Option<f64>,
    /// Two-sided paired bootstrap p-value for a zero mean difference.
    pub p_value: f64,
}

/// Compares paired per-sample values. The p-value resamples the centered
/// differences `d_i - mean(d)` and counts bootstrap means at least as far
/// from zero as the observed mean difference.
pub fn deviation(baseline: &[f64], new: &[f64], config: BootstrapConfig) -> Result<Deviation> {
    if baseline.len() != new.len() {
        return Err(Error::Dimension {
            expected: baseline.len(),
            got: new.len(),
        });
    }
    let n = baseline.len();
    if n < 2 {
        return Err(Error::Invalid(format!("deviation needs at least 2 paired samples, got {n}")));
    }
    if config.resamples == 0 {
        return Err(Error::Config("resamples must be >= 1".into()));
    }
    let diffs: Vec<f64> = new.iter().zip(baseline).map(|(b, a)| b - a).collect();
    let d_bar = mean(&diffs);
    let centered: Vec<f64> = diffs.iter().map(|d| d - d_bar).collect();
    let observed = d_bar.abs();
    // Tolerance so that all-equal differences count as "at least as extreme".
    let tol = 1e-12 * (1.0 + observed);

    const CHUNK: usize = 256;
    let chunks = config.resamples.div_ceil(CHUNK);
    let extreme: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(config.seed, Purpose::Bootstrap, c as u64);
            let count = CHUNK.min(config.resamples - c * CHUNK);
            (0..count)
                .filter(|_| {
                    let s: f64 = (0..n).map(|_| centered[rng.random_range(0..n)]).sum();
                    (s / n as f64).abs() >= observed - tol
                })
                .count()
        })
        .sum();
    let baseline_mean = mean(baseline);
    let new_mean = mean(new);
    Ok(Deviation {
        n,
        baseline_mean,
        new_mean,
        delta: d_bar,
        relative_delta: (baseline_mean != 0.0).then(|| d_bar / baseline_mean.abs()),
        p_value: (1 + extreme) as f64 / (config.resamples + 1) as f64,
    })
}

/// Side-by-side comparison of two policies on the same interactions, in
/// percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyComparison {
    pub replication: Deviation,
    pub expected_reward: Deviation,
}

pub fn compare_policies(
    baseline: &PolicySnapshot,
    new: &PolicySnapshot,
    data: &Dataset,
    config: BootstrapConfig,
) -> Result<PolicyComparison> {
    let pct = |v: Vec<f64>| v.into_iter().map(|x| 100.0 * x).collect::<Vec<_>>();
    let replication = deviation(
        &pct(replication_indicators(baseline, data)?),
        &pct(replication_indicators(new, data)?),
        config,
    )?;
    let expected_reward = deviation(
        &pct(ips_terms(baseline, data)?),
        &pct(ips_terms(new, data)?),
        config,
    )?;
    Ok(PolicyComparison {
        replication,
        expected_reward,
    })
}

/// Table with Replication %, Expected Reward % and Deviation % columns.
pub fn render_comparison(c: &PolicyComparison) -> String {
    let mut out = format!(
        "{:<16} {:>12} {:>12} {:>12} {:>10}\n",
        "metric", "baseline", "new", "deviation", "p-value"
    );
    for (name, d) in [("Replication %", &c.replication), ("Expected Reward %", &c.expected_reward)] {
        out.push_str(&format!(
            "{:<16} {:>12.4} {:>12.4} {:>12.4} {:>10.4}\n",
            name, d.baseline_mean, d.new_mean, d.delta, d.p_value
        ));
    }
    out
}
