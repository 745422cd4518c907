//! Synthetic routing world and the end-to-end lifecycle driver.
//!
//! Contexts come from a mixture of Gaussian clusters; every context offers the
//! same set of actions ("skills"), each embedded in the context space. Each
//! cluster has a ground-truth Bernoulli success probability per action, with
//! the action embedded nearest to the cluster center being the best one.
//! Logged rewards come from an observed table that matches the truth except
//! in defect clusters, where the feedback for a poor action is inflated; the
//! logging policy is a tempered softmax over a noisy copy of that table. A policy trained on these logs inherits
//! the defect, which is what the lifecycle detects, hot-fixes and remediates.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{
    self, Candidate, Dataset, LifecycleStatus, LoggedInteraction, RpCounts, RpDataset, RpSample, SampleType,
    Severity, SplitTag,
};
use crate::error::{Error, Result};
use crate::evaluation::{self, CertaintyRule, EvaluationOptions, EvaluationReport, ReportFormat};
use crate::guardrail::{self, DeploymentVerdict, GateConfig, Verdict};
use crate::hotfix::{
    self, ActionPredicate, CandidateSelector, ContextPredicate, GlobPattern, Handler, HotfixRule, HotfixRuleSet,
    RoutingMode,
};
use crate::metrics::{self, BootstrapConfig, Deviation, PolicyComparison, Remediation};
use crate::policy::{self, argmax_action, Activation, PolicyArchitecture, PolicySnapshot, PolicyVersion};
use crate::rng::{self, counter2, Purpose};
use crate::training::{self, EpochRecord, StepRecord, TrainingConfig};

/// Attempts made by [`run_lifecycle`] before giving up on a seed whose
/// baseline shows no defect.
pub const MAX_ATTEMPTS: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_clusters: usize,
    pub n_actions: usize,
    pub context_dim: usize,
    pub n_defects: usize,
    /// Scale of cluster centers.
    pub center_scale: f64,
    /// Standard deviation of contexts around their center; 0 makes the
    /// context space finite.
    pub cluster_spread: f64,
    /// Traffic weight of a defect cluster relative to a regular one.
    pub defect_traffic_weight: f64,
    pub logging_temperature: f64,
    /// Logged success rate of the defect action above the cluster's best
    /// truth (capped at 1).
    pub defect_boost: f64,
    /// Noise on the logging policy's scores.
    pub observation_noise: f64,
    /// Appends the elementwise product of context and action embedding to
    /// each candidate's features.
    pub interaction_features: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_clusters: 24,
            n_actions: 5,
            context_dim: 8,
            n_defects: 10,
            center_scale: 4.0,
            cluster_spread: 0.3,
            defect_traffic_weight: 0.5,
            logging_temperature: 0.1,
            defect_boost: 0.3,
            observation_noise: 0.02,
            interaction_features: true,
        }
    }
}

impl WorldConfig {
    pub fn feature_dim(&self) -> usize {
        if self.interaction_features {
            3 * self.context_dim
        } else {
            2 * self.context_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_clusters == 0 || self.n_actions < 2 || self.context_dim == 0 {
            return bad("world needs >= 1 cluster, >= 2 actions and a nonzero context dim".into());
        }
        if self.n_defects == 0 {
            return bad("world needs at least one defect cluster".into());
        }
        if self.n_defects > self.n_clusters {
            return bad(format!("{} defects exceed {} clusters", self.n_defects, self.n_clusters));
        }
        for (name, v) in [
            ("center_scale", self.center_scale),
            ("cluster_spread", self.cluster_spread),
            ("defect_boost", self.defect_boost),
            ("observation_noise", self.observation_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(self.defect_traffic_weight > 0.0) || !(self.logging_temperature > 0.0) {
            return bad("defect_traffic_weight and logging_temperature must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub cluster: usize,
    pub defect_action: usize,
    pub best_action: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub seed: u64,
    pub centers: Vec<Vec<f64>>,
    pub action_embeddings: Vec<Vec<f64>>,
    /// Ground-truth success probability, cluster x action.
    pub truth: Vec<Vec<f64>>,
    /// Success probability of the logged feedback signal: the truth, except
    /// that defect cells report the inflated value.
    pub observed: Vec<Vec<f64>>,
    /// Logging propensities per cluster.
    pub logging: Vec<Vec<f64>>,
    /// Unnormalized traffic weights.
    pub cluster_weights: Vec<f64>,
    pub is_defect: Vec<bool>,
    pub defects: Vec<DefectSpec>,
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn nearest(x: &[f64], points: &[Vec<f64>]) -> usize {
    let d2 = |p: &Vec<f64>| p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    (0..points.len())
        .min_by(|&i, &j| d2(&points[i]).total_cmp(&d2(&points[j])))
        .expect("at least one point")
}

fn nearest_except(x: &[f64], points: &[Vec<f64>], skip: usize) -> usize {
    let d2 = |p: &Vec<f64>| p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    (0..points.len())
        .filter(|&i| i != skip)
        .min_by(|&i, &j| d2(&points[i]).total_cmp(&d2(&points[j])))
        .expect("at least two points")
}

pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<SyntheticWorld> {
    config.validate()?;
    let mut rng = rng::stream(seed, Purpose::World, 0);
    let k = config.n_actions;
    let centers: Vec<Vec<f64>> = (0..config.n_clusters)
        .map(|_| normal_vec(&mut rng, config.context_dim, config.center_scale))
        .collect();
    let action_embeddings: Vec<Vec<f64>> = (0..k)
        .map(|_| normal_vec(&mut rng, config.context_dim, config.center_scale))
        .collect();

    let mut clusters: Vec<usize> = (0..config.n_clusters).collect();
    rand::seq::SliceRandom::shuffle(clusters.as_mut_slice(), &mut rng);
    let mut is_defect = vec![false; config.n_clusters];
    for &c in &clusters[..config.n_defects] {
        is_defect[c] = true;
    }

    let mut truth = Vec::with_capacity(config.n_clusters);
    let mut observed = Vec::with_capacity(config.n_clusters);
    let mut logging = Vec::with_capacity(config.n_clusters);
    let mut defects = Vec::new();
    for (c, &defect) in is_defect.iter().enumerate() {
        let best = nearest(&centers[c], &action_embeddings);
        let mut t: Vec<f64> = (0..k)
            .map(|a| {
                if a == best {
                    rng.random_range(0.6..0.75)
                } else {
                    rng.random_range(0.1..0.45)
                }
            })
            .collect();
        let mut o = t.clone();
        if defect {
            // The runner-up embedding, so the defect is a plausible mistake.
            let d = nearest_except(&centers[c], &action_embeddings, best);
            t[d] = rng.random_range(0.05..0.15);
            o[d] = (t[best] + config.defect_boost).min(1.0);
            defects.push(DefectSpec {
                cluster: c,
                defect_action: d,
                best_action: best,
            });
        }
        let scores: Vec<f64> = o
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (v + config.observation_noise * z) / config.logging_temperature
            })
            .collect();
        logging.push(policy::softmax(&scores));
        truth.push(t);
        observed.push(o);
    }
    let cluster_weights = is_defect
        .iter()
        .map(|&d| if d { config.defect_traffic_weight } else { 1.0 })
        .collect();
    Ok(SyntheticWorld {
        config: config.clone(),
        seed,
        centers,
        action_embeddings,
        truth,
        observed,
        logging,
        cluster_weights,
        is_defect,
        defects,
    })
}

/// Which part of the traffic a log belongs to; also the context id tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogPart {
    Train,
    Validation,
    Holdout,
    Custom(u32),
}

impl LogPart {
    fn code(self) -> u64 {
        match self {
            Self::Train => 0,
            Self::Validation => 1,
            Self::Holdout => 2,
            Self::Custom(c) => 3 + u64::from(c),
        }
    }

    fn tag(self) -> String {
        match self {
            Self::Train => "t".into(),
            Self::Validation => "v".into(),
            Self::Holdout => "h".into(),
            Self::Custom(c) => format!("x{c}"),
        }
    }
}

pub fn context_id(cluster: usize, tag: &str, index: usize) -> String {
    format!("c{cluster:03}-{tag}{index:06}")
}

pub fn candidate_id(action: usize) -> String {
    format!("skill-{action}")
}

impl SyntheticWorld {
    pub fn n_clusters(&self) -> usize {
        self.centers.len()
    }

    pub fn n_actions(&self) -> usize {
        self.action_embeddings.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Candidates for a context vector: `[context ; action embedding]`,
    /// followed by their elementwise product when enabled.
    pub fn candidates(&self, context: &[f64]) -> Vec<Candidate> {
        self.action_embeddings
            .iter()
            .enumerate()
            .map(|(a, e)| {
                let mut features: Vec<f64> = context.iter().chain(e).copied().collect();
                if self.config.interaction_features {
                    features.extend(context.iter().zip(e).map(|(x, y)| x * y));
                }
                Candidate {
                    candidate_id: candidate_id(a),
                    features,
                }
            })
            .collect()
    }

    pub fn draw_context<R: Rng + ?Sized>(&self, cluster: usize, rng: &mut R) -> Vec<f64> {
        let noise = normal_vec(rng, self.config.context_dim, self.config.cluster_spread);
        self.centers[cluster].iter().zip(noise).map(|(m, z)| m + z).collect()
    }

    pub fn draw_cluster<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total: f64 = self.cluster_weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (c, w) in self.cluster_weights.iter().enumerate() {
            if u < *w {
                return c;
            }
            u -= w;
        }
        self.cluster_weights.len() - 1
    }

    /// Cluster encoded in a generated context id.
    pub fn cluster_of(&self, x: &LoggedInteraction) -> Option<usize> {
        let id = x.context_id.strip_prefix('c')?;
        let c: usize = id.split('-').next()?.parse().ok()?;
        (c < self.n_clusters()).then_some(c)
    }

    /// Ground-truth expected reward of a propensity vector in a cluster.
    pub fn expected_reward(&self, cluster: usize, propensities: &[f64]) -> f64 {
        propensities.iter().zip(&self.truth[cluster]).map(|(p, t)| p * t).sum()
    }

    /// Exact expected logged reward of `policy` when contexts sit at cluster
    /// centers, weighted by traffic.
    pub fn enumerated_policy_value(&self, policy: &PolicySnapshot) -> Result<f64> {
        let total: f64 = self.cluster_weights.iter().sum();
        let mut v = 0.0;
        for c in 0..self.n_clusters() {
            let p = policy.propensities(&self.candidates(&self.centers[c]))?;
            v += self.cluster_weights[c] / total * self.expected_feedback(c, &p);
        }
        Ok(v)
    }

    /// Expected logged reward of a propensity vector in a cluster.
    pub fn expected_feedback(&self, cluster: usize, propensities: &[f64]) -> f64 {
        propensities.iter().zip(&self.observed[cluster]).map(|(p, t)| p * t).sum()
    }

    /// Exact expected logged reward under the logging policy.
    pub fn logging_value(&self) -> f64 {
        let total: f64 = self.cluster_weights.iter().sum();
        (0..self.n_clusters())
            .map(|c| self.cluster_weights[c] / total * self.expected_feedback(c, &self.logging[c]))
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let w: Self = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("world file: {e}")))?;
        w.config.validate()?;
        Ok(w)
    }
}

/// `n` interactions logged by the world's logging policy. Record `i` uses its
/// own counter window, so generation order does not matter.
pub fn simulate_logs(world: &SyntheticWorld, n: usize, seed: u64, part: LogPart) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("number of logs must be >= 1".into()));
    }
    let tag = part.tag();
    let interactions = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, Purpose::Logs, counter2(part.code(), i as u64));
            let c = world.draw_cluster(&mut rng);
            let x = world.draw_context(c, &mut rng);
            let a = policy::sample_action(&world.logging[c], &mut rng).expect("nonempty propensities");
            let reward = if rng.random::<f64>() < world.observed[c][a] { 1.0 } else { 0.0 };
            LoggedInteraction {
                context_id: context_id(c, &tag, i),
                candidates: world.candidates(&x),
                chosen_action: a,
                logging_propensity: world.logging[c][a],
                reward,
            }
        })
        .collect();
    Ok(Dataset {
        split: SplitTag::Train,
        feature_dim: Some(world.feature_dim()),
        interactions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncidentConfig {
    pub regressions_per_incident: usize,
    pub progressions_per_incident: usize,
    /// Fraction of the baseline's argmax decisions on a defect cluster that
    /// must hit the defect action for the defect to count as manifested.
    pub manifest_threshold: f64,
    /// Contexts probed per cluster when checking manifestation.
    pub probes: usize,
    pub first_report: NaiveDate,
}

impl Default for IncidentConfig {
    fn default() -> Self {
        Self {
            regressions_per_incident: 3,
            progressions_per_incident: 3,
            manifest_threshold: 0.5,
            probes: 64,
            first_report: NaiveDate::from_ymd_opt(2024, 1, 8).expect("valid date"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Incidents {
    pub rp: RpDataset,
    pub rules: HotfixRuleSet,
    pub manifested: Vec<DefectSpec>,
}

impl Incidents {
    pub fn is_empty(&self) -> bool {
        self.manifested.is_empty()
    }
}

pub fn incident_id(cluster: usize) -> String {
    format!("INC-{cluster:03}")
}

/// Turns every defect the baseline reproduces into an incident: regression
/// samples replaying the defect action, progression samples carrying the
/// best action, and a rule sending the defect action to the best one.
pub fn craft_incidents(
    world: &SyntheticWorld,
    baseline: &PolicySnapshot,
    config: &IncidentConfig,
    seed: u64,
) -> Result<Incidents> {
    let mut samples = Vec::new();
    let mut rules = Vec::new();
    let mut manifested = Vec::new();
    for (k, d) in world.defects.iter().enumerate() {
        let mut rng = rng::stream(seed, Purpose::Incidents, d.cluster as u64);
        let mut hits = Vec::new();
        let mut misses = Vec::new();
        for _ in 0..config.probes {
            let x = world.draw_context(d.cluster, &mut rng);
            let p = baseline.propensities(&world.candidates(&x))?;
            if argmax_action(&p)? == d.defect_action {
                hits.push(x);
            } else {
                misses.push(x);
            }
        }
        let rate = hits.len() as f64 / config.probes.max(1) as f64;
        if hits.len() < config.regressions_per_incident || rate < config.manifest_threshold {
            tracing::info!(cluster = d.cluster, rate, "defect not manifested");
            continue;
        }
        let incident = incident_id(d.cluster);
        let severity = Severity::new(1 + (k % 5) as u8)?;
        let reported_date = config.first_report + chrono::Days::new(7 * manifested.len() as u64);
        let tag = "rp";
        let mut push = |idx: usize, sample_type: SampleType, x: &[f64], action: usize, propensity: f64| {
            let letter = match sample_type {
                SampleType::Regression => 'R',
                SampleType::Progression => 'P',
            };
            samples.push(RpSample {
                uid: format!("rp-{:03}-{letter}{idx}", d.cluster),
                incident_id: incident.clone(),
                sample_type,
                severity,
                reported_date,
                lifecycle_status: LifecycleStatus::Active,
                description: format!(
                    "cluster {} routed to {} instead of {}",
                    d.cluster,
                    candidate_id(d.defect_action),
                    candidate_id(d.best_action)
                ),
                interaction: LoggedInteraction {
                    context_id: context_id(d.cluster, tag, samples_len_hint(letter, idx)),
                    candidates: world.candidates(x),
                    chosen_action: action,
                    logging_propensity: propensity,
                    reward: if sample_type == SampleType::Regression { 0.0 } else { 1.0 },
                },
            });
        };
        // Regressions replay logged defect decisions; progressions are
        // curated, so they carry no logging propensity.
        for (i, x) in hits.iter().take(config.regressions_per_incident).enumerate() {
            push(i, SampleType::Regression, x, d.defect_action, world.logging[d.cluster][d.defect_action]);
        }
        let pool: Vec<&Vec<f64>> = hits
            .iter()
            .skip(config.regressions_per_incident)
            .chain(misses.iter())
            .collect();
        for i in 0..config.progressions_per_incident {
            let x = pool.get(i).copied().cloned().unwrap_or_else(|| world.draw_context(d.cluster, &mut rng));
            push(i, SampleType::Progression, &x, d.best_action, domain::DEFAULT_RP_PROPENSITY);
        }
        rules.push(HotfixRule {
            rule_id: format!("hotfix-{:03}", d.cluster),
            incident_id: incident.clone(),
            context: ContextPredicate::ContextId {
                glob: GlobPattern::new(&format!("c{:03}-*", d.cluster))?,
            },
            action: ActionPredicate::CandidateIdIn {
                ids: [candidate_id(d.defect_action)].into_iter().collect(),
            },
            override_action: CandidateSelector::Id(candidate_id(d.best_action)),
            active: true,
        });
        manifested.push(d.clone());
    }
    let mut rp = RpDataset::new(SplitTag::Train, samples)?;
    rp.feature_dim = Some(world.feature_dim());
    Ok(Incidents {
        rp,
        rules: HotfixRuleSet::new(rules)?,
        manifested,
    })
}

fn samples_len_hint(letter: char, idx: usize) -> usize {
    // Regression contexts get even ids, progression contexts odd ones.
    2 * idx + usize::from(letter == 'P')
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub world: WorldConfig,
    pub incidents: IncidentConfig,
    pub n_train_logs: usize,
    pub n_validation_logs: usize,
    pub n_holdout_logs: usize,
    /// Share of each incident's samples (per type) used for training.
    pub rp_train_fraction: f64,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    /// Shared by the baseline and remediation runs; the seed is replaced by
    /// the lifecycle seed.
    pub training: TrainingConfig,
    pub gate: GateConfig,
    pub certainty_rule: CertaintyRule,
    pub bootstrap_resamples: usize,
    /// Stamped on reports; fixed by default so runs are byte-identical.
    pub timestamp: String,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            incidents: IncidentConfig::default(),
            n_train_logs: 20_000,
            n_validation_logs: 2_000,
            n_holdout_logs: 10_000,
            rp_train_fraction: 2.0 / 3.0,
            hidden_dims: vec![64],
            activation: Activation::Relu,
            training: TrainingConfig {
                epochs: 15,
                ips_clip: Some(10.0),
                ..TrainingConfig::default()
            },
            gate: GateConfig::default(),
            certainty_rule: CertaintyRule::LoggedAction,
            bootstrap_resamples: metrics::DEFAULT_RESAMPLES,
            timestamp: evaluation::DEFAULT_TIMESTAMP.to_string(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.training.validate()?;
        self.gate.validate()?;
        if self.n_train_logs == 0 || self.n_validation_logs == 0 || self.n_holdout_logs < 2 {
            return Err(Error::Config("log counts must be positive (hold-out >= 2)".into()));
        }
        if !(self.rp_train_fraction > 0.0 && self.rp_train_fraction < 1.0) {
            return Err(Error::Config("rp_train_fraction must be in (0,1)".into()));
        }
        if self.incidents.regressions_per_incident < 2 || self.incidents.progressions_per_incident < 2 {
            return Err(Error::Config("incidents need >= 2 samples per type to split".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn architecture(&self) -> PolicyArchitecture {
        PolicyArchitecture::new(self.world.feature_dim(), self.hidden_dims.clone(), self.activation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub verdict: Verdict,
    pub offending: usize,
    pub max_bound: f64,
}

impl From<&DeploymentVerdict> for GateSummary {
    fn from(v: &DeploymentVerdict) -> Self {
        Self {
            verdict: v.verdict,
            offending: v.offending_uids.len(),
            max_bound: v.decisions.iter().map(|d| d.intersection_lower_bound).fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStage {
    pub version: PolicyVersion,
    pub fail_train: usize,
    pub fail_test: usize,
    /// Gate with the hot-fixes in place.
    pub gate_with_hotfixes: GateSummary,
    /// Gate as if every hot-fix were retired (`Q = 1`).
    pub gate_without_hotfixes: GateSummary,
    pub defect_cluster_reward: f64,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveTraffic {
    /// Mean ground-truth reward of fresh draws, `baseline + hot-fixes`.
    pub baseline_hotfixed: f64,
    pub remediated_hotfixed: f64,
    /// The remediated policy with every hot-fix retired.
    pub remediated_alone: f64,
    pub hotfix_share_baseline: f64,
    pub hotfix_share_remediated: f64,
    pub deviation: Deviation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifecycleSummary {
    pub seed: u64,
    pub world_seed: u64,
    pub attempts: u64,
    pub n_incidents: usize,
    pub rp_train: RpCounts,
    pub rp_test: RpCounts,
    pub baseline: PolicyStage,
    pub remediated: PolicyStage,
    pub remediation_train: Remediation,
    pub remediation_test: Remediation,
    pub holdout_size: usize,
    pub holdout: PolicyComparison,
    pub live_traffic: LiveTraffic,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

/// Collects run artifacts and later writes them with a manifest.
#[derive(Debug, Default)]
pub struct RunDirectory {
    files: BTreeMap<String, Vec<u8>>,
}

impl RunDirectory {
    pub fn add(&mut self, path: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.insert(path.into(), bytes.into());
    }

    pub fn add_json<T: Serialize>(&mut self, path: &str, value: &T) {
        let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
        self.add(path, text);
    }

    pub fn files(&self) -> &BTreeMap<String, Vec<u8>> {
        &self.files
    }

    pub fn manifest(&self, seed: u64) -> Manifest {
        Manifest {
            seed,
            files: self
                .files
                .iter()
                .map(|(p, b)| ManifestEntry {
                    path: p.clone(),
                    bytes: b.len() as u64,
                    sha256: hex::encode(Sha256::digest(b)),
                })
                .collect(),
        }
    }

    /// Writes every artifact under `root` plus `manifest.json`.
    pub fn write(&self, root: &Path, seed: u64) -> Result<PathBuf> {
        self.write_with_manifest(root, seed, "manifest.json")
    }

    pub fn write_with_manifest(&self, root: &Path, seed: u64, manifest_name: &str) -> Result<PathBuf> {
        for (rel, bytes) in &self.files {
            let path = root.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        let manifest = root.join(manifest_name);
        let text = serde_json::to_string_pretty(&self.manifest(seed)).expect("serializable") + "\n";
        fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
        Ok(manifest)
    }
}

pub struct LifecycleRun {
    pub summary: LifecycleSummary,
    pub artifacts: RunDirectory,
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter().map(|r| domain::to_line(r) + "\n").collect()
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at_stage(stage))
}

/// Runs the full lifecycle for `seed` on the current rayon pool.
pub fn run_lifecycle(config: &ScenarioConfig, seed: u64) -> Result<LifecycleRun> {
    staged("config", config.validate())?;
    for attempt in 0..MAX_ATTEMPTS {
        let world_seed = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        match run_attempt(config, seed, world_seed, attempt + 1)? {
            Some(run) => return Ok(run),
            None => tracing::warn!(seed, attempt, "no manifested defect; retrying with a new world"),
        }
    }
    Err(Error::Stage {
        stage: "incidents",
        source: Box::new(Error::Empty("manifested defects")),
    })
}

/// [`run_lifecycle`] on a dedicated pool of `threads` workers (0 = rayon's
/// default).
pub fn run_lifecycle_with_threads(config: &ScenarioConfig, seed: u64, threads: usize) -> Result<LifecycleRun> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_lifecycle(config, seed))
}

fn evaluate(
    policy: &PolicySnapshot,
    rules: &HotfixRuleSet,
    rp: &RpDataset,
    options: &EvaluationOptions,
) -> Result<EvaluationReport> {
    evaluation::evaluate_dataset(policy, rules, rp, options)
}

fn defect_cluster_reward(world: &SyntheticWorld, policy: &PolicySnapshot, holdout: &Dataset) -> Result<f64> {
    let rows: Vec<f64> = holdout
        .interactions
        .par_iter()
        .filter_map(|x| {
            let c = world.cluster_of(x)?;
            world.is_defect[c].then_some((c, x))
        })
        .map(|(c, x)| {
            let p = policy.propensities(&x.candidates)?;
            Ok(world.truth[c][argmax_action(&p)?])
        })
        .collect::<Result<_>>()?;
    Ok(if rows.is_empty() { 0.0 } else { rows.iter().sum::<f64>() / rows.len() as f64 })
}

/// Serves every hold-out context through the router and draws a reward from
/// the ground truth. Returns per-context rewards and the hot-fix share.
fn live_rewards(
    world: &SyntheticWorld,
    policy: &PolicySnapshot,
    rules: &HotfixRuleSet,
    holdout: &Dataset,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let served = holdout
        .interactions
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let c = world.cluster_of(x).ok_or_else(|| Error::Invalid(format!("unknown cluster in `{}`", x.context_id)))?;
            // The same draw decides the reward for both policies.
            let mut rng = rng::stream(seed, Purpose::Holdout, i as u64);
            let d = hotfix::route(rules, policy, x, RoutingMode::Argmax, &mut rng)?;
            let u: f64 = rng.random();
            Ok((if u < world.truth[c][d.action] { 1.0 } else { 0.0 }, d.handler == Handler::Hotfix))
        })
        .collect::<Result<Vec<_>>>()?;
    let share = served.iter().filter(|s| s.1).count() as f64 / served.len().max(1) as f64;
    Ok((served.into_iter().map(|s| 100.0 * s.0).collect(), share))
}

fn run_attempt(config: &ScenarioConfig, seed: u64, world_seed: u64, attempts: u64) -> Result<Option<LifecycleRun>> {
    let mut dir = RunDirectory::default();
    let mut warnings = Vec::new();
    let world = staged("world", generate_world(&config.world, world_seed))?;
    let train_logs = staged("logs", simulate_logs(&world, config.n_train_logs, world_seed, LogPart::Train))?;
    let mut validation = staged("logs", simulate_logs(&world, config.n_validation_logs, world_seed, LogPart::Validation))?;
    validation.split = SplitTag::Validation;
    let mut holdout_all = staged("logs", simulate_logs(&world, config.n_holdout_logs, world_seed, LogPart::Holdout))?;
    holdout_all.split = SplitTag::Test;
    dir.add_json("world.json", &world);
    dir.add("logs/train.jsonl", domain::render_interactions(&train_logs));
    dir.add("logs/validation.jsonl", domain::render_interactions(&validation));
    dir.add("logs/holdout.jsonl", domain::render_interactions(&holdout_all));

    let tcfg = TrainingConfig {
        seed,
        ..config.training.clone()
    };
    let init = staged("init", PolicySnapshot::initialize(config.architecture(), seed))?;
    let baseline = staged("baseline", training::train(&init, &train_logs, None, &tcfg, Some(&validation)))?;
    let base_policy = baseline.final_policy().clone();
    write_training(&mut dir, "baseline", &baseline.snapshots, &baseline.steps, &baseline.epochs);

    let incidents = staged("incidents", craft_incidents(&world, &base_policy, &config.incidents, seed))?;
    if incidents.is_empty() {
        return Ok(None);
    }
    let mut split_rng = rng::stream(seed, Purpose::Split, 0);
    let (rp_train, rp_test) = staged(
        "split",
        domain::split_by_incident(incidents.rp.samples.clone(), config.rp_train_fraction, &mut split_rng),
    )?;
    let split = staged("split", domain::validate_rp_split(&rp_train, &rp_test))?;
    warnings.extend(split.warnings);
    dir.add("rp/train.jsonl", domain::render_rp_dataset(&rp_train));
    dir.add("rp/test.jsonl", domain::render_rp_dataset(&rp_test));
    dir.add("hotfix_rules.json", incidents.rules.render());

    let options = EvaluationOptions {
        certainty_rule: config.certainty_rule,
        timestamp: config.timestamp.clone(),
    };
    let none = HotfixRuleSet::empty();
    let holdout = Dataset {
        split: SplitTag::Test,
        feature_dim: holdout_all.feature_dim,
        interactions: holdout_all
            .interactions
            .iter()
            .filter(|x| incidents.rules.untouched(x) && world.cluster_of(x).is_some_and(|c| !world.is_defect[c]))
            .cloned()
            .collect(),
    };

    let base_stage = staged(
        "baseline evaluation",
        stage_summary(&world, &base_policy, &incidents.rules, &none, &rp_train, &rp_test, &options, config, &holdout_all, &baseline.epochs, &mut dir, "baseline"),
    )?;

    let remediation = staged(
        "remediation",
        training::train(&init, &train_logs, Some(&rp_train), &tcfg, Some(&validation)),
    )?;
    warnings.extend(remediation.warnings.iter().cloned());
    let new_policy = remediation.final_policy().clone();
    write_training(&mut dir, "remediated", &remediation.snapshots, &remediation.steps, &remediation.epochs);
    let new_stage = staged(
        "remediated evaluation",
        stage_summary(&world, &new_policy, &incidents.rules, &none, &rp_train, &rp_test, &options, config, &holdout_all, &remediation.epochs, &mut dir, "remediated"),
    )?;

    let reports = |p: &PolicySnapshot, rp: &RpDataset| evaluate(p, &incidents.rules, rp, &options);
    let remediation_train = staged(
        "metrics",
        metrics::remediation_percentage(&reports(&base_policy, &rp_train)?, &reports(&new_policy, &rp_train)?),
    )?;
    let remediation_test = staged(
        "metrics",
        metrics::remediation_percentage(&reports(&base_policy, &rp_test)?, &reports(&new_policy, &rp_test)?),
    )?;
    let boot = BootstrapConfig {
        resamples: config.bootstrap_resamples,
        seed,
    };
    let holdout_cmp = staged("metrics", metrics::compare_policies(&base_policy, &new_policy, &holdout, boot))?;

    let (base_live, base_share) = staged("live traffic", live_rewards(&world, &base_policy, &incidents.rules, &holdout_all, seed))?;
    let (new_live, new_share) = staged("live traffic", live_rewards(&world, &new_policy, &incidents.rules, &holdout_all, seed))?;
    let (alone_live, _) = staged("live traffic", live_rewards(&world, &new_policy, &none, &holdout_all, seed))?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let live_traffic = LiveTraffic {
        baseline_hotfixed: mean(&base_live),
        remediated_hotfixed: mean(&new_live),
        remediated_alone: mean(&alone_live),
        hotfix_share_baseline: base_share,
        hotfix_share_remediated: new_share,
        deviation: staged("live traffic", metrics::deviation(&base_live, &new_live, boot))?,
    };

    let summary = LifecycleSummary {
        seed,
        world_seed,
        attempts,
        n_incidents: incidents.manifested.len(),
        rp_train: rp_train.counts(),
        rp_test: rp_test.counts(),
        baseline: base_stage,
        remediated: new_stage,
        remediation_train,
        remediation_test,
        holdout_size: holdout.len(),
        holdout: holdout_cmp,
        live_traffic,
        warnings,
    };
    dir.add("metrics/comparison.txt", metrics::render_comparison(&summary.holdout));
    dir.add_json("summary.json", &summary);
    Ok(Some(LifecycleRun {
        summary,
        artifacts: dir,
    }))
}

fn write_training(
    dir: &mut RunDirectory,
    name: &str,
    snapshots: &[PolicySnapshot],
    steps: &[StepRecord],
    epochs: &[EpochRecord],
) {
    for (e, s) in snapshots.iter().enumerate() {
        dir.add(format!("{name}/epoch-{e:03}.ckpt"), policy::save_checkpoint(s));
    }
    dir.add(format!("{name}/steps.jsonl"), jsonl(steps));
    dir.add(format!("{name}/epochs.jsonl"), jsonl(epochs));
}

#[allow(clippy::too_many_arguments)]
fn stage_summary(
    world: &SyntheticWorld,
    policy: &PolicySnapshot,
    rules: &HotfixRuleSet,
    none: &HotfixRuleSet,
    rp_train: &RpDataset,
    rp_test: &RpDataset,
    options: &EvaluationOptions,
    config: &ScenarioConfig,
    holdout: &Dataset,
    epochs: &[EpochRecord],
    dir: &mut RunDirectory,
    name: &str,
) -> Result<PolicyStage> {
    let all = RpDataset {
        split: SplitTag::Test,
        feature_dim: rp_test.feature_dim,
        samples: rp_train.samples.iter().chain(&rp_test.samples).cloned().collect(),
    };
    let with = evaluate(policy, rules, &all, options)?;
    let without = evaluate(policy, none, &all, options)?;
    let gate_with = guardrail::gate_report(&with, &config.gate)?;
    let gate_without = guardrail::gate_report(&without, &config.gate)?;
    let fails = |r: &RpDataset| -> Result<usize> { Ok(evaluate(policy, rules, r, options)?.fail_count()) };
    dir.add(format!("reports/{name}.jsonl"), evaluation::render_report(&with, ReportFormat::Structured));
    dir.add(format!("reports/{name}.txt"), evaluation::render_report(&with, ReportFormat::Table));
    dir.add(format!("reports/{name}-without-hotfixes.jsonl"), evaluation::render_report(&without, ReportFormat::Structured));
    dir.add_json(&format!("gates/{name}.json"), &gate_with);
    dir.add_json(&format!("gates/{name}-without-hotfixes.json"), &gate_without);
    Ok(PolicyStage {
        version: policy.version(),
        fail_train: fails(rp_train)?,
        fail_test: fails(rp_test)?,
        gate_with_hotfixes: GateSummary::from(&gate_with),
        gate_without_hotfixes: GateSummary::from(&gate_without),
        defect_cluster_reward: defect_cluster_reward(world, policy, holdout)?,
        epochs: epochs.to_vec(),
    })
}
