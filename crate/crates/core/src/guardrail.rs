//! Pre-deployment gate on the overlap between failure certainty and
//! expected eligibility.
//!
//! For each evaluated sample the failure certainty `P(C)` (the certainty of a
//! FAIL row, or one minus the certainty of a PASS row) and the eligibility
//! `P(Q)` bound the probability that the sample is both served by the policy
//! and misrouted. The default gate uses the most lenient bound,
//! `max(0, P(C) + P(Q) - 1)`, and skips samples where that bound is zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::Severity;
use crate::error::{Error, Result};
use crate::evaluation::{EvaluationReport, SampleEvaluation, SampleStatus};

/// Differences smaller than this are treated as ties, so that decimal
/// inputs such as `0.3 + 0.7` compare as their exact values would.
pub const TIE_EPSILON: f64 = 1e-12;

pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BoundMode {
    /// Minimal overlap, `max(0, P(C) + P(Q) - 1)`.
    #[default]
    BestCase,
    /// Maximal overlap, `min(P(C), P(Q))`.
    WorstCase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub failure_threshold: f64,
    /// Per-grade overrides of `failure_threshold`.
    #[serde(default)]
    pub severity_thresholds: BTreeMap<u8, f64>,
    #[serde(default)]
    pub bound: BoundMode,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
            severity_thresholds: BTreeMap::new(),
            bound: BoundMode::BestCase,
        }
    }
}

impl GateConfig {
    pub fn with_threshold(failure_threshold: f64) -> Result<Self> {
        let c = Self {
            failure_threshold,
            ..Self::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |t: f64| (0.0..=1.0).contains(&t);
        if !ok(self.failure_threshold) {
            return Err(Error::Config(format!(
                "failure threshold must be in [0,1], got {}",
                self.failure_threshold
            )));
        }
        for (g, t) in &self.severity_thresholds {
            if !ok(*t) {
                return Err(Error::Config(format!("severity {g} threshold {t} not in [0,1]")));
            }
        }
        Ok(())
    }

    pub fn threshold_for(&self, severity: Severity) -> f64 {
        self.severity_thresholds
            .get(&severity.grade())
            .copied()
            .unwrap_or(self.failure_threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GateOutcome {
    GatePass,
    GateFail,
    GateSkip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub uid: String,
    pub outcome: GateOutcome,
    pub intersection_lower_bound: f64,
    pub threshold: f64,
}

/// Gate outcome and bound for raw probabilities.
pub fn gate_probabilities(p_fail: f64, p_eligible: f64, threshold: f64, mode: BoundMode) -> Result<(GateOutcome, f64)> {
    for (name, v) in [("failure certainty", p_fail), ("eligibility", p_eligible), ("threshold", threshold)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Invalid(format!("{name} must be in [0,1], got {v}")));
        }
    }
    let (skip, bound) = match mode {
        BoundMode::BestCase => {
            let sum = p_fail + p_eligible;
            if sum <= 1.0 + TIE_EPSILON {
                (true, 0.0)
            } else {
                (false, sum - 1.0)
            }
        }
        BoundMode::WorstCase => {
            let b = p_fail.min(p_eligible);
            (b <= TIE_EPSILON, b)
        }
    };
    let outcome = if skip {
        GateOutcome::GateSkip
    } else if bound > threshold + TIE_EPSILON {
        GateOutcome::GateFail
    } else {
        GateOutcome::GatePass
    };
    Ok((outcome, if skip { 0.0 } else { bound }))
}

/// Failure certainty of a row: PASS rows are inverted.
pub fn failure_certainty(eval: &SampleEvaluation) -> f64 {
    match eval.status {
        SampleStatus::Fail => eval.certainty,
        SampleStatus::Pass => 1.0 - eval.certainty,
    }
}

pub fn gate_sample(eval: &SampleEvaluation, config: &GateConfig) -> Result<GateDecision> {
    let threshold = config.threshold_for(eval.severity);
    let (outcome, bound) = gate_probabilities(failure_certainty(eval), eval.eligibility, threshold, config.bound)?;
    Ok(GateDecision {
        uid: eval.uid.clone(),
        outcome,
        intersection_lower_bound: bound,
        threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Approve,
    Block,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentVerdict {
    pub verdict: Verdict,
    pub offending_uids: Vec<String>,
    /// Bounds of the offending rows, aligned with `offending_uids`.
    pub bounds: Vec<f64>,
    #[serde(rename = "T_f")]
    pub failure_threshold: f64,
    pub decisions: Vec<GateDecision>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// BLOCK iff some row fails the gate. Skipped rows count as passing.
pub fn gate_report(report: &EvaluationReport, config: &GateConfig) -> Result<DeploymentVerdict> {
    config.validate()?;
    let decisions = report
        .rows
        .iter()
        .map(|r| gate_sample(r, config))
        .collect::<Result<Vec<_>>>()?;
    let offenders: Vec<&GateDecision> = decisions
        .iter()
        .filter(|d| d.outcome == GateOutcome::GateFail)
        .collect();
    let mut warnings = Vec::new();
    if decisions.is_empty() {
        warnings.push("empty report: nothing to gate".to_string());
        tracing::warn!("gating an empty report");
    }
    Ok(DeploymentVerdict {
        verdict: if offenders.is_empty() { Verdict::Approve } else { Verdict::Block },
        offending_uids: offenders.iter().map(|d| d.uid.clone()).collect(),
        bounds: offenders.iter().map(|d| d.intersection_lower_bound).collect(),
        failure_threshold: config.failure_threshold,
        decisions,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::SampleType;
    use crate::policy::PolicyVersion;

    fn row(uid: &str, status: SampleStatus, c: f64, q: f64) -> SampleEvaluation {
        SampleEvaluation {
            uid: uid.into(),
            sample_type: SampleType::Regression,
            severity: Severity::new(1).unwrap(),
            status,
            certainty: c,
            eligibility: q,
            replayed_argmax: 0,
            replayed_propensities: vec![1.0],
        }
    }

    fn gate(status: SampleStatus, c: f64, q: f64, t: f64) -> GateDecision {
        gate_sample(&row("s", status, c, q), &GateConfig::with_threshold(t).unwrap()).unwrap()
    }

    #[test]
    fn fail_row_above_threshold() {
        let d = gate(SampleStatus::Fail, 0.9, 0.3, 0.1);
        assert_eq!(d.outcome, GateOutcome::GateFail);
        assert!((d.intersection_lower_bound - 0.2).abs() < 1e-12);
    }

    #[test]
    fn fail_row_skipped_when_sum_below_one() {
        assert_eq!(gate(SampleStatus::Fail, 0.7, 0.2, 0.1).outcome, GateOutcome::GateSkip);
    }

    #[test]
    fn pass_row_is_inverted() {
        let d = gate(SampleStatus::Pass, 0.95, 0.9, 0.5);
        assert_eq!(d.outcome, GateOutcome::GateSkip);
        assert_eq!(d.intersection_lower_bound, 0.0);
    }

    #[test]
    fn high_overlap_fails() {
        let d = gate(SampleStatus::Fail, 0.9, 0.9, 0.5);
        assert_eq!(d.outcome, GateOutcome::GateFail);
        assert!((d.intersection_lower_bound - 0.8).abs() < 1e-12);
    }

    #[test]
    fn decimal_ties_do_not_fail() {
        // 0.02 + 0.99 - 1 evaluates to 0.010000000000000009 in binary.
        assert_eq!(gate(SampleStatus::Fail, 0.02, 0.99, 0.01).outcome, GateOutcome::GatePass);
        assert_eq!(gate(SampleStatus::Fail, 0.3, 0.7, 0.0).outcome, GateOutcome::GateSkip);
    }

    #[test]
    fn worst_case_mode() {
        let config = GateConfig {
            bound: BoundMode::WorstCase,
            ..GateConfig::default()
        };
        let d = gate_sample(&row("s", SampleStatus::Fail, 0.7, 0.2), &config).unwrap();
        assert_eq!(d.outcome, GateOutcome::GatePass);
        assert!((d.intersection_lower_bound - 0.2).abs() < 1e-15);
        let d = gate_sample(&row("s", SampleStatus::Fail, 0.7, 0.6), &config).unwrap();
        assert_eq!(d.outcome, GateOutcome::GateFail);
    }

    #[test]
    fn severity_override() {
        let mut config = GateConfig::default();
        config.severity_thresholds.insert(1, 0.05);
        let d = gate_sample(&row("s", SampleStatus::Fail, 0.9, 0.3), &config).unwrap();
        assert_eq!(d.threshold, 0.05);
        assert_eq!(d.outcome, GateOutcome::GateFail);
    }

    #[test]
    fn report_verdicts() {
        let report = EvaluationReport::new(
            PolicyVersion(1),
            "t".into(),
            vec![
                row("a", SampleStatus::Pass, 0.9, 1.0),
                row("b", SampleStatus::Fail, 0.9, 0.9),
                row("c", SampleStatus::Fail, 0.6, 0.2),
            ],
        );
        let v = gate_report(&report, &GateConfig::default()).unwrap();
        assert_eq!(v.verdict, Verdict::Block);
        assert_eq!(v.offending_uids, vec!["b"]);
        assert!((v.bounds[0] - 0.8).abs() < 1e-12);

        let skips = EvaluationReport::new(PolicyVersion(1), "t".into(), vec![row("c", SampleStatus::Fail, 0.6, 0.2)]);
        assert_eq!(gate_report(&skips, &GateConfig::default()).unwrap().verdict, Verdict::Approve);

        let empty = EvaluationReport::new(PolicyVersion(1), "t".into(), vec![]);
        let v = gate_report(&empty, &GateConfig::default()).unwrap();
        assert_eq!(v.verdict, Verdict::Approve);
        assert_eq!(v.warnings.len(), 1);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(GateConfig::with_threshold(1.5).is_err());
        assert!(gate_probabilities(1.2, 0.5, 0.5, BoundMode::BestCase).is_err());
    }
}
