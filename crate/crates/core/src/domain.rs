//! Logged interactions, curated regression/progression samples, and their
//! line-delimited file format.
//!
//! Every file starts with one header record naming the schema, its version,
//! the split tag and (optionally) the feature dimension, followed by one JSON
//! record per line:
//!
//! ```text
//! {"schema":"rpguard/interactions","version":1,"split":"TRAIN","feature_dim":2}
//! {"context_id":"c00-000001","candidates":[{"candidate_id":"skill-0","features":[0.1,0.2]}],"chosen_action":0,"logging_propensity":1.0,"reward":1.0}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INTERACTIONS_SCHEMA: &str = "rpguard/interactions";
pub const RP_SCHEMA: &str = "rpguard/rp-samples";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub candidate_id: String,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedInteraction {
    pub context_id: String,
    pub candidates: Vec<Candidate>,
    pub chosen_action: usize,
    pub logging_propensity: f64,
    pub reward: f64,
}

impl LoggedInteraction {
    /// Checks the record invariants. `feature_dim`, when given, is enforced on
    /// every candidate. Errors carry `line` for loader diagnostics.
    pub fn validate(&self, feature_dim: Option<usize>, line: usize) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::record(line, "candidates", "at least one candidate is required"));
        }
        if self.chosen_action >= self.candidates.len() {
            return Err(Error::record(
                line,
                "chosen_action",
                format!(
                    "index {} out of range for {} candidates",
                    self.chosen_action,
                    self.candidates.len()
                ),
            ));
        }
        let p = self.logging_propensity;
        if !p.is_finite() || p <= 0.0 || p > 1.0 {
            return Err(Error::record(
                line,
                "logging_propensity",
                format!("propensity must be in (0,1], got {p}"),
            ));
        }
        if !self.reward.is_finite() || !(0.0..=1.0).contains(&self.reward) {
            return Err(Error::record(
                line,
                "reward",
                format!("reward must be in [0,1], got {}", self.reward),
            ));
        }
        for (i, c) in self.candidates.iter().enumerate() {
            if let Some(dim) = feature_dim {
                if c.features.len() != dim {
                    return Err(Error::Schema(format!(
                        "line {line}: candidates[{i}].features has length {}, schema feature_dim is {dim}",
                        c.features.len()
                    )));
                }
            }
            if let Some(j) = c.features.iter().position(|v| !v.is_finite()) {
                return Err(Error::record(
                    line,
                    format!("candidates[{i}].features[{j}]"),
                    "features must be finite",
                ));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.candidates.first().map(|c| c.features.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SampleType {
    Regression,
    Progression,
}

impl fmt::Display for SampleType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleType::Regression => "REGRESSION",
            SampleType::Progression => "PROGRESSION",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LifecycleStatus {
    Active,
    Deprecated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SplitTag {
    #[default]
    Train,
    Validation,
    Test,
}

/// Incident severity grade, 1 (most severe) to 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Severity(u8);

impl Severity {
    pub const MOST_SEVERE: Severity = Severity(1);

    pub fn new(grade: u8) -> Result<Self> {
        Self::try_from(grade).map_err(Error::Invalid)
    }

    pub fn grade(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for Severity {
    type Error = String;
    fn try_from(grade: u8) -> std::result::Result<Self, String> {
        if (1..=5).contains(&grade) {
            Ok(Severity(grade))
        } else {
            Err(format!("severity must be 1..=5, got {grade}"))
        }
    }
}

impl From<Severity> for u8 {
    fn from(s: Severity) -> u8 {
        s.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpSample {
    pub uid: String,
    pub incident_id: String,
    pub sample_type: SampleType,
    pub severity: Severity,
    pub reported_date: NaiveDate,
    pub lifecycle_status: LifecycleStatus,
    pub description: String,
    /// For REGRESSION the chosen action is the defective one, for PROGRESSION
    /// it is the desired one.
    pub interaction: LoggedInteraction,
}

impl RpSample {
    pub fn is_active(&self) -> bool {
        self.lifecycle_status == LifecycleStatus::Active
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub split: SplitTag,
    pub feature_dim: Option<usize>,
    pub interactions: Vec<LoggedInteraction>,
}

impl Dataset {
    pub fn new(split: SplitTag, interactions: Vec<LoggedInteraction>) -> Self {
        let feature_dim = interactions.first().and_then(LoggedInteraction::feature_dim);
        Self {
            split,
            feature_dim,
            interactions,
        }
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RpDataset {
    pub split: SplitTag,
    pub feature_dim: Option<usize>,
    pub samples: Vec<RpSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RpCounts {
    pub total: usize,
    pub active: usize,
    pub regression: usize,
    pub progression: usize,
}

impl RpDataset {
    pub fn new(split: SplitTag, samples: Vec<RpSample>) -> Result<Self> {
        check_unique_uids(&samples)?;
        let feature_dim = samples
            .first()
            .and_then(|s| s.interaction.feature_dim());
        Ok(Self {
            split,
            feature_dim,
            samples,
        })
    }

    /// Samples that take part in evaluation, gating and training.
    pub fn active(&self) -> impl Iterator<Item = &RpSample> {
        self.samples.iter().filter(|s| s.is_active())
    }

    /// Counts by type are over ACTIVE samples only.
    pub fn counts(&self) -> RpCounts {
        let mut c = RpCounts {
            total: self.samples.len(),
            ..RpCounts::default()
        };
        for s in self.active() {
            c.active += 1;
            match s.sample_type {
                SampleType::Regression => c.regression += 1,
                SampleType::Progression => c.progression += 1,
            }
        }
        c
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn check_unique_uids(samples: &[RpSample]) -> Result<()> {
    let mut seen = BTreeSet::new();
    let mut dups = BTreeSet::new();
    for s in samples {
        if !seen.insert(s.uid.as_str()) {
            dups.insert(s.uid.clone());
        }
    }
    if dups.is_empty() {
        Ok(())
    } else {
        Err(Error::DuplicateUid(dups.into_iter().collect()))
    }
}

/// A loaded value together with non-fatal findings.
#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

/// Expectations the caller places on an interaction file.
#[derive(Debug, Clone, Copy, Default)]
pub struct InteractionSchema {
    pub feature_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
    #[serde(default)]
    split: SplitTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_dim: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RpRecord {
    uid: String,
    sample_type: SampleType,
    severity: Severity,
    reported_date: NaiveDate,
    lifecycle_status: LifecycleStatus,
    incident_id: String,
    #[serde(default)]
    description: String,
    context_id: String,
    candidates: Vec<Candidate>,
    chosen_action: usize,
    #[serde(default)]
    logging_propensity: Option<f64>,
    reward: f64,
}

/// Logging propensity assumed for R/P samples whose record omits it.
pub const DEFAULT_RP_PROPENSITY: f64 = 1.0;

fn parse_record<T: DeserializeOwned>(line_no: usize, line: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "<record>".to_string() } else { path };
        Error::record(line_no, field, e.into_inner().to_string())
    })
}

/// Splits text into (1-based line number, content) pairs for non-blank lines.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn read_header<'a>(
    it: &mut impl Iterator<Item = (usize, &'a str)>,
    schema: &str,
) -> Result<Option<Header>> {
    let Some((line_no, line)) = it.next() else {
        return Ok(None);
    };
    let header: Header = parse_record(line_no, line)?;
    if header.schema != schema {
        return Err(Error::Schema(format!(
            "expected schema `{schema}`, found `{}`",
            header.schema
        )));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported {schema} version {} (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    Ok(Some(header))
}

fn resolve_dim(header: Option<usize>, expected: Option<usize>) -> Result<Option<usize>> {
    match (header, expected) {
        (Some(h), Some(e)) if h != e => Err(Error::Schema(format!(
            "file declares feature_dim {h}, expected {e}"
        ))),
        (h, e) => Ok(h.or(e)),
    }
}

pub fn parse_interactions(text: &str, schema: InteractionSchema) -> Result<Loaded<Dataset>> {
    let mut warnings = Vec::new();
    let mut it = lines(text);
    let Some(header) = read_header(&mut it, INTERACTIONS_SCHEMA)? else {
        warnings.push("interaction file is empty".to_string());
        return Ok(Loaded {
            value: Dataset {
                feature_dim: schema.feature_dim,
                ..Dataset::default()
            },
            warnings,
        });
    };
    let mut dim = resolve_dim(header.feature_dim, schema.feature_dim)?;
    let mut interactions = Vec::new();
    for (line_no, line) in it {
        let rec: LoggedInteraction = parse_record(line_no, line)?;
        if dim.is_none() {
            dim = rec.feature_dim();
        }
        rec.validate(dim, line_no)?;
        interactions.push(rec);
    }
    if interactions.is_empty() {
        warnings.push("interaction file has no records".to_string());
    }
    Ok(Loaded {
        value: Dataset {
            split: header.split,
            feature_dim: dim,
            interactions,
        },
        warnings,
    })
}

pub fn load_interactions(path: &Path, schema: InteractionSchema) -> Result<Loaded<Dataset>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let loaded = parse_interactions(&text, schema)?;
    for w in &loaded.warnings {
        tracing::warn!(path = %path.display(), "{w}");
    }
    Ok(loaded)
}

pub fn render_interactions(ds: &Dataset) -> String {
    let header = Header {
        schema: INTERACTIONS_SCHEMA.to_string(),
        version: FORMAT_VERSION,
        split: ds.split,
        feature_dim: ds.feature_dim,
    };
    let mut out = to_line(&header);
    for rec in &ds.interactions {
        out.push_str(&to_line(rec));
    }
    out
}

pub fn write_interactions(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, render_interactions(ds)).map_err(|e| Error::io(path, e))
}

pub fn parse_rp_dataset(text: &str) -> Result<Loaded<RpDataset>> {
    let mut warnings = Vec::new();
    let mut it = lines(text);
    let Some(header) = read_header(&mut it, RP_SCHEMA)? else {
        warnings.push("R/P file is empty".to_string());
        return Ok(Loaded {
            value: RpDataset::default(),
            warnings,
        });
    };
    let mut dim = header.feature_dim;
    let mut samples = Vec::new();
    for (line_no, line) in it {
        let rec: RpRecord = parse_record(line_no, line)?;
        let interaction = LoggedInteraction {
            context_id: rec.context_id,
            candidates: rec.candidates,
            chosen_action: rec.chosen_action,
            logging_propensity: rec.logging_propensity.unwrap_or(DEFAULT_RP_PROPENSITY),
            reward: rec.reward,
        };
        if dim.is_none() {
            dim = interaction.feature_dim();
        }
        interaction.validate(dim, line_no)?;
        samples.push(RpSample {
            uid: rec.uid,
            incident_id: rec.incident_id,
            sample_type: rec.sample_type,
            severity: rec.severity,
            reported_date: rec.reported_date,
            lifecycle_status: rec.lifecycle_status,
            description: rec.description,
            interaction,
        });
    }
    check_unique_uids(&samples)?;
    let value = RpDataset {
        split: header.split,
        feature_dim: dim,
        samples,
    };
    let counts = value.counts();
    if counts.active == 0 {
        warnings.push("R/P file has no ACTIVE samples".to_string());
    }
    Ok(Loaded { value, warnings })
}

pub fn load_rp_dataset(path: &Path) -> Result<Loaded<RpDataset>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let loaded = parse_rp_dataset(&text)?;
    let c = loaded.value.counts();
    tracing::info!(
        path = %path.display(),
        total = c.total,
        active = c.active,
        regression = c.regression,
        progression = c.progression,
        "loaded R/P dataset"
    );
    for w in &loaded.warnings {
        tracing::warn!(path = %path.display(), "{w}");
    }
    Ok(loaded)
}

pub fn render_rp_dataset(ds: &RpDataset) -> String {
    let header = Header {
        schema: RP_SCHEMA.to_string(),
        version: FORMAT_VERSION,
        split: ds.split,
        feature_dim: ds.feature_dim,
    };
    let mut out = to_line(&header);
    for s in &ds.samples {
        let rec = RpRecord {
            uid: s.uid.clone(),
            sample_type: s.sample_type,
            severity: s.severity,
            reported_date: s.reported_date,
            lifecycle_status: s.lifecycle_status,
            incident_id: s.incident_id.clone(),
            description: s.description.clone(),
            context_id: s.interaction.context_id.clone(),
            candidates: s.interaction.candidates.clone(),
            chosen_action: s.interaction.chosen_action,
            logging_propensity: Some(s.interaction.logging_propensity),
            reward: s.interaction.reward,
        };
        out.push_str(&to_line(&rec));
    }
    out
}

pub fn write_rp_dataset(path: &Path, ds: &RpDataset) -> Result<()> {
    fs::write(path, render_rp_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub(crate) fn to_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("record serialization is infallible");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TypeCounts {
    pub regression: usize,
    pub progression: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncidentCoverage {
    pub incident_id: String,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train_count: usize,
    pub test_count: usize,
    pub train_ratio: f64,
    pub test_ratio: f64,
    pub train_types: TypeCounts,
    pub test_types: TypeCounts,
    pub incidents: Vec<IncidentCoverage>,
    pub warnings: Vec<String>,
}

/// Checks that two R/P splits are disjoint by uid and reports how incidents
/// are spread across them. Counts are over ACTIVE samples.
pub fn validate_rp_split(train: &RpDataset, test: &RpDataset) -> Result<SplitSummary> {
    let train_uids: BTreeSet<&str> = train.samples.iter().map(|s| s.uid.as_str()).collect();
    let overlap: Vec<String> = test
        .samples
        .iter()
        .filter(|s| train_uids.contains(s.uid.as_str()))
        .map(|s| s.uid.clone())
        .collect();
    if !overlap.is_empty() {
        return Err(Error::SplitOverlap(overlap));
    }

    let type_counts = |ds: &RpDataset| {
        let c = ds.counts();
        TypeCounts {
            regression: c.regression,
            progression: c.progression,
        }
    };
    let mut per_incident: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for s in train.active() {
        per_incident.entry(&s.incident_id).or_default().0 += 1;
    }
    for s in test.active() {
        per_incident.entry(&s.incident_id).or_default().1 += 1;
    }
    let mut warnings = Vec::new();
    let incidents = per_incident
        .into_iter()
        .map(|(id, (tr, te))| {
            if tr == 0 {
                warnings.push(format!("incident `{id}` has no samples in the train split"));
            }
            if te == 0 {
                warnings.push(format!("incident `{id}` has no samples in the test split"));
            }
            IncidentCoverage {
                incident_id: id.to_string(),
                train: tr,
                test: te,
            }
        })
        .collect();

    let train_count = train.counts().active;
    let test_count = test.counts().active;
    let total = (train_count + test_count).max(1) as f64;
    Ok(SplitSummary {
        train_count,
        test_count,
        train_ratio: train_count as f64 / total,
        test_ratio: test_count as f64 / total,
        train_types: type_counts(train),
        test_types: type_counts(test),
        incidents,
        warnings,
    })
}

/// Splits samples into train/test per (incident, type) group so every
/// incident lands in both splits when it has at least two samples of a type.
pub fn split_by_incident<R: Rng + ?Sized>(
    samples: Vec<RpSample>,
    train_fraction: f64,
    rng: &mut R,
) -> Result<(RpDataset, RpDataset)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!(
            "train fraction must be in [0,1], got {train_fraction}"
        )));
    }
    let mut groups: BTreeMap<(String, SampleType), Vec<RpSample>> = BTreeMap::new();
    for s in samples {
        groups
            .entry((s.incident_id.clone(), s.sample_type))
            .or_default()
            .push(s);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (_, mut group) in groups {
        group.shuffle(rng);
        let n = group.len();
        let n_train = if n >= 2 {
            ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1)
        } else {
            n
        };
        let rest = group.split_off(n_train);
        train.extend(group);
        test.extend(rest);
    }
    train.sort_by(|a, b| a.uid.cmp(&b.uid));
    test.sort_by(|a, b| a.uid.cmp(&b.uid));
    Ok((
        RpDataset::new(SplitTag::Train, train)?,
        RpDataset::new(SplitTag::Test, test)?,
    ))
}
