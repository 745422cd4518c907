//! Off-policy policy lifecycle with regression/progression (R/P) samples:
//! IPS training with augmented R/P replay, hot-fix routing, R/P evaluation,
//! pre-deployment guard-railing, and a synthetic end-to-end scenario.

// Range checks are negated so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod domain;
pub mod error;
pub mod evaluation;
pub mod guardrail;
pub mod hotfix;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod scenario;
pub mod training;

pub use domain::{
    Candidate, Dataset, LifecycleStatus, LoggedInteraction, RpDataset, RpSample, SampleType, Severity, SplitTag,
};
pub use error::{Error, Result};
pub use evaluation::{CertaintyRule, EvaluationReport, SampleEvaluation, SampleStatus};
pub use guardrail::{DeploymentVerdict, GateConfig, GateOutcome, Verdict};
pub use hotfix::{HotfixRule, HotfixRuleSet, RoutingMode};
pub use policy::{Activation, PolicyArchitecture, PolicySnapshot, PolicyVersion};
pub use training::{TrainingConfig, TrainingOutcome};
