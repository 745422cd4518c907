//! Replays a policy on curated R/P samples and builds the per-sample report.
//!
//! Status follows the logged action: a PROGRESSION sample passes when the
//! replayed argmax equals the logged (desired) action, a REGRESSION sample
//! fails exactly when the logged (defective) action is repeated. Certainty is
//! `Pi(a_hat|X)` for passed progressions and failed regressions and
//! `1 - Pi(a_hat|X)` otherwise.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{RpDataset, RpSample, SampleType, Severity};
use crate::error::{Error, Result};
use crate::hotfix::{expected_eligibility_from, HotfixRuleSet};
use crate::policy::{argmax_action, PolicySnapshot, PolicyVersion};

/// Report timestamp used unless a caller supplies one.
pub const DEFAULT_TIMESTAMP: &str = "1970-01-01T00:00:00Z";

pub const REPORT_SCHEMA: &str = "rpguard/report";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SampleStatus {
    Pass,
    Fail,
}

/// How certainty is assigned outside the "confirming" branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CertaintyRule {
    /// `1 - Pi(a_hat|X)` for failed progressions and passed regressions.
    #[default]
    Literal,
    /// `1 - Pi(a_logged|X)` for failed progressions and passed regressions:
    /// the probability that the policy does not pick the logged action.
    LoggedAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEvaluation {
    pub uid: String,
    #[serde(rename = "type")]
    pub sample_type: SampleType,
    pub severity: Severity,
    pub status: SampleStatus,
    pub certainty: f64,
    pub eligibility: f64,
    pub replayed_argmax: usize,
    pub replayed_propensities: Vec<f64>,
}

/// Status and certainty for a replayed propensity vector.
pub fn assign_status(
    sample_type: SampleType,
    logged_action: usize,
    propensities: &[f64],
    rule: CertaintyRule,
) -> Result<(SampleStatus, f64, usize)> {
    let a_hat = argmax_action(propensities)?;
    if logged_action >= propensities.len() {
        return Err(Error::Invalid(format!(
            "logged action {logged_action} out of range for {} candidates",
            propensities.len()
        )));
    }
    let repeated = a_hat == logged_action;
    let status = match (sample_type, repeated) {
        (SampleType::Progression, true) | (SampleType::Regression, false) => SampleStatus::Pass,
        (SampleType::Progression, false) | (SampleType::Regression, true) => SampleStatus::Fail,
    };
    let confirming = repeated;
    let certainty = if confirming {
        propensities[a_hat]
    } else {
        match rule {
            CertaintyRule::Literal => 1.0 - propensities[a_hat],
            CertaintyRule::LoggedAction => 1.0 - propensities[logged_action],
        }
    };
    Ok((status, certainty.clamp(0.0, 1.0), a_hat))
}

pub fn evaluate_sample(
    policy: &PolicySnapshot,
    rules: &HotfixRuleSet,
    sample: &RpSample,
    rule: CertaintyRule,
) -> Result<SampleEvaluation> {
    if !sample.is_active() {
        return Err(Error::Deprecated(sample.uid.clone()));
    }
    let x = &sample.interaction;
    let p = policy.propensities(&x.candidates)?;
    let (status, certainty, a_hat) = assign_status(sample.sample_type, x.chosen_action, &p, rule)?;
    let eligibility = expected_eligibility_from(rules, x, &p)?;
    Ok(SampleEvaluation {
        uid: sample.uid.clone(),
        sample_type: sample.sample_type,
        severity: sample.severity,
        status,
        certainty,
        eligibility,
        replayed_argmax: a_hat,
        replayed_propensities: p,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PassFail {
    pub pass: usize,
    pub fail: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportSummary {
    pub total: PassFail,
    pub regression: PassFail,
    pub progression: PassFail,
    /// All uids, FAIL rows first, then by descending `certainty * eligibility`.
    pub ranking: Vec<String>,
    /// FAIL rows whose least possible overlap of certainty and eligibility,
    /// `certainty + eligibility - 1`, stays within the default failure
    /// threshold: failures that are unlikely to reach users.
    pub low_concern: Vec<String>,
}

impl ReportSummary {
    fn from_rows(rows: &[SampleEvaluation]) -> Self {
        let mut s = ReportSummary::default();
        for r in rows {
            let bucket = match r.sample_type {
                SampleType::Regression => &mut s.regression,
                SampleType::Progression => &mut s.progression,
            };
            match r.status {
                SampleStatus::Pass => {
                    bucket.pass += 1;
                    s.total.pass += 1;
                }
                SampleStatus::Fail => {
                    bucket.fail += 1;
                    s.total.fail += 1;
                    if r.certainty + r.eligibility - 1.0 <= crate::guardrail::DEFAULT_FAILURE_THRESHOLD {
                        s.low_concern.push(r.uid.clone());
                    }
                }
            }
        }
        let mut order: Vec<&SampleEvaluation> = rows.iter().collect();
        order.sort_by(|a, b| {
            let fail_first = (b.status == SampleStatus::Fail).cmp(&(a.status == SampleStatus::Fail));
            fail_first.then_with(|| {
                (b.certainty * b.eligibility).total_cmp(&(a.certainty * a.eligibility))
            })
        });
        s.ranking = order.into_iter().map(|r| r.uid.clone()).collect();
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub policy_version: PolicyVersion,
    pub timestamp: String,
    /// Dataset order.
    pub rows: Vec<SampleEvaluation>,
    pub summary: ReportSummary,
    pub warnings: Vec<String>,
}

impl EvaluationReport {
    pub fn new(policy_version: PolicyVersion, timestamp: String, rows: Vec<SampleEvaluation>) -> Self {
        let summary = ReportSummary::from_rows(&rows);
        let warnings = if rows.is_empty() {
            vec!["no ACTIVE R/P samples were evaluated".to_string()]
        } else {
            Vec::new()
        };
        Self {
            policy_version,
            timestamp,
            rows,
            summary,
            warnings,
        }
    }

    pub fn fail_count(&self) -> usize {
        self.summary.total.fail
    }

    pub fn row(&self, uid: &str) -> Option<&SampleEvaluation> {
        self.rows.iter().find(|r| r.uid == uid)
    }
}

#[derive(Debug, Clone)]
pub struct EvaluationOptions {
    pub certainty_rule: CertaintyRule,
    pub timestamp: String,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        Self {
            certainty_rule: CertaintyRule::default(),
            timestamp: DEFAULT_TIMESTAMP.to_string(),
        }
    }
}

/// One row per ACTIVE sample, in dataset order.
pub fn evaluate_dataset(
    policy: &PolicySnapshot,
    rules: &HotfixRuleSet,
    rp: &RpDataset,
    options: &EvaluationOptions,
) -> Result<EvaluationReport> {
    let active: Vec<&RpSample> = rp.active().collect();
    let rows = active
        .par_iter()
        .map(|s| evaluate_sample(policy, rules, s, options.certainty_rule))
        .collect::<Result<Vec<_>>>()?;
    let report = EvaluationReport::new(policy.version(), options.timestamp.clone(), rows);
    for w in &report.warnings {
        tracing::warn!("{w}");
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Structured,
}

#[derive(Serialize, Deserialize)]
struct ReportHeader {
    schema: String,
    version: u32,
    policy_version: PolicyVersion,
    timestamp: String,
    rows: usize,
}

#[derive(Serialize, Deserialize)]
struct ReportLine {
    #[serde(flatten)]
    row: SampleEvaluation,
    policy_version: PolicyVersion,
    timestamp: String,
}

fn status_str(s: SampleStatus) -> &'static str {
    match s {
        SampleStatus::Pass => "PASS",
        SampleStatus::Fail => "FAIL",
    }
}

pub fn render_report(report: &EvaluationReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Table => {
            let uid_w = report.rows.iter().map(|r| r.uid.len()).max().unwrap_or(0).max(3);
            let mut out = String::new();
            let _ = writeln!(
                out,
                "{:<uid_w$}  {:<11}  {:<6}  {:>9}  {:>11}",
                "uid", "type", "status", "certainty", "eligibility"
            );
            for r in &report.rows {
                let _ = writeln!(
                    out,
                    "{:<uid_w$}  {:<11}  {:<6}  {:>9.4}  {:>11.4}",
                    r.uid,
                    r.sample_type.to_string(),
                    status_str(r.status),
                    r.certainty,
                    r.eligibility
                );
            }
            out
        }
        ReportFormat::Structured => {
            let header = ReportHeader {
                schema: REPORT_SCHEMA.to_string(),
                version: 1,
                policy_version: report.policy_version,
                timestamp: report.timestamp.clone(),
                rows: report.rows.len(),
            };
            let mut out = crate::domain::to_line(&header);
            for r in &report.rows {
                out.push_str(&crate::domain::to_line(&ReportLine {
                    row: r.clone(),
                    policy_version: report.policy_version,
                    timestamp: report.timestamp.clone(),
                }));
            }
            out
        }
    }
}

pub fn parse_structured_report(text: &str) -> Result<EvaluationReport> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(Error::Empty("report"))?;
    let header: ReportHeader =
        serde_json::from_str(first).map_err(|e| Error::record(1, "<header>", e.to_string()))?;
    if header.schema != REPORT_SCHEMA || header.version != 1 {
        return Err(Error::Schema(format!(
            "expected {REPORT_SCHEMA} v1, found {} v{}",
            header.schema, header.version
        )));
    }
    let mut rows = Vec::with_capacity(header.rows);
    for (i, line) in lines {
        let rec: ReportLine =
            serde_json::from_str(line).map_err(|e| Error::record(i + 1, "<row>", e.to_string()))?;
        if rec.policy_version != header.policy_version {
            return Err(Error::record(i + 1, "policy_version", "does not match header"));
        }
        rows.push(rec.row);
    }
    if rows.len() != header.rows {
        return Err(Error::Schema(format!(
            "header declares {} rows, found {}",
            header.rows,
            rows.len()
        )));
    }
    Ok(EvaluationReport::new(header.policy_version, header.timestamp, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(uid: &str, t: SampleType, status: SampleStatus, c: f64, q: f64) -> SampleEvaluation {
        SampleEvaluation {
            uid: uid.into(),
            sample_type: t,
            severity: Severity::new(2).unwrap(),
            status,
            certainty: c,
            eligibility: q,
            replayed_argmax: 0,
            replayed_propensities: vec![c, 1.0 - c],
        }
    }

    #[test]
    fn progression_pass() {
        let (s, c, a) = assign_status(SampleType::Progression, 1, &[0.1, 0.8, 0.1], CertaintyRule::Literal).unwrap();
        assert_eq!((s, a), (SampleStatus::Pass, 1));
        assert_eq!(c, 0.8);
    }

    #[test]
    fn regression_fail() {
        let (s, c, _) = assign_status(SampleType::Regression, 0, &[0.9, 0.05, 0.05], CertaintyRule::Literal).unwrap();
        assert_eq!(s, SampleStatus::Fail);
        assert_eq!(c, 0.9);
    }

    #[test]
    fn regression_pass_literal_branch() {
        let (s, c, a) = assign_status(SampleType::Regression, 0, &[0.2, 0.7, 0.1], CertaintyRule::Literal).unwrap();
        assert_eq!((s, a), (SampleStatus::Pass, 1));
        assert!((c - 0.3).abs() < 1e-15);
        let (_, c, _) = assign_status(SampleType::Regression, 0, &[0.2, 0.7, 0.1], CertaintyRule::LoggedAction).unwrap();
        assert!((c - 0.8).abs() < 1e-15);
    }

    #[test]
    fn summary_counts_and_ordering() {
        let rows = vec![
            row("a", SampleType::Progression, SampleStatus::Pass, 0.9, 1.0),
            row("b", SampleType::Regression, SampleStatus::Fail, 0.9, 0.3),
            row("c", SampleType::Regression, SampleStatus::Pass, 0.6, 1.0),
        ];
        let r = EvaluationReport::new(PolicyVersion(3), "t".into(), rows);
        assert_eq!(r.summary.total, PassFail { pass: 2, fail: 1 });
        assert_eq!(r.summary.regression, PassFail { pass: 1, fail: 1 });
        assert_eq!(r.summary.ranking, vec!["b", "a", "c"]);
        // High certainty, low eligibility: flagged as low concern.
        assert_eq!(r.summary.low_concern, vec!["b"]);
    }

    #[test]
    fn empty_report_renders_header_only() {
        let r = EvaluationReport::new(PolicyVersion(1), "t".into(), vec![]);
        assert_eq!(r.warnings.len(), 1);
        let table = render_report(&r, ReportFormat::Table);
        assert_eq!(table.lines().count(), 1);
        assert!(table.starts_with("uid"));
    }

    #[test]
    fn table_uses_four_decimals() {
        let r = EvaluationReport::new(
            PolicyVersion(1),
            "t".into(),
            vec![row("r-001", SampleType::Regression, SampleStatus::Fail, 0.123456, 0.5)],
        );
        let table = render_report(&r, ReportFormat::Table);
        let line = table.lines().nth(1).unwrap();
        assert!(line.contains("0.1235") && line.contains("0.5000"), "{line}");
        assert!(line.contains("REGRESSION") && line.contains("FAIL"));
    }

    #[test]
    fn structured_round_trip() {
        let r = EvaluationReport::new(
            PolicyVersion(12),
            "2024-05-01T00:00:00Z".into(),
            vec![
                row("x", SampleType::Progression, SampleStatus::Pass, 0.1 + 0.2, 1.0 / 3.0),
                row("y", SampleType::Regression, SampleStatus::Fail, 0.75, 0.5),
            ],
        );
        let text = render_report(&r, ReportFormat::Structured);
        assert_eq!(parse_structured_report(&text).unwrap(), r);
        let first_row: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        for k in ["uid", "type", "status", "certainty", "eligibility", "policy_version", "timestamp"] {
            assert!(first_row.get(k).is_some(), "missing {k}");
        }
    }
}
