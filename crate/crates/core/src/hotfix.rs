//! Hand-crafted hot-fix rules, the eligibility they induce, and the combined
//! router that sends intercepted traffic to the rule's override action.
//!
//! A rule intercepts action `a` on interaction `X` when both its context
//! predicate (over `X`) and its action predicate (over `a`) match. The
//! per-action eligibility `g(X, a)` is 0 when any active rule intercepts, and
//! expected eligibility is `Q(X) = sum_i g(X, a_i) * Pi(a_i | X)`.
//!
//! Rule files are a single JSON document:
//!
//! ```json
//! {"schema":"rpguard/hotfix-rules","version":1,"rules":[
//!   {"rule_id":"hf-1","incident_id":"inc-1",
//!    "context":{"op":"context_id","glob":"c03-*"},
//!    "action":{"op":"candidate_id_in","ids":["skill-2"]},
//!    "override_action":{"id":"skill-4"},"active":true}]}
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::LoggedInteraction;
use crate::error::{Error, Result};
use crate::policy::{argmax_action, sample_action, PolicySnapshot};

pub const RULES_SCHEMA: &str = "rpguard/hotfix-rules";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
}

impl Comparison {
    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Comparison::Lt => lhs < rhs,
            Comparison::Le => lhs <= rhs,
            Comparison::Eq => lhs == rhs,
            Comparison::Ge => lhs >= rhs,
            Comparison::Gt => lhs > rhs,
        }
    }
}

/// Which candidates a feature comparison inspects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateScope {
    Any,
    All,
    Index(usize),
    Id(String),
}

/// Context-id glob (`*`, `?`, `[..]`), compiled once at load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobPattern(glob::Pattern);

impl GlobPattern {
    pub fn new(pattern: &str) -> Result<Self> {
        glob::Pattern::new(pattern)
            .map(GlobPattern)
            .map_err(|e| Error::Invalid(format!("bad glob `{pattern}`: {e}")))
    }

    pub fn matches(&self, s: &str) -> bool {
        self.0.matches(s)
    }
}

impl Serialize for GlobPattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.0.as_str())
    }
}

impl<'de> Deserialize<'de> for GlobPattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        GlobPattern::new(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ContextPredicate {
    Always,
    Feature {
        candidate: CandidateScope,
        index: usize,
        cmp: Comparison,
        value: f64,
    },
    /// Some candidate's id is in the set.
    CandidatePresent { ids: BTreeSet<String> },
    ContextId { glob: GlobPattern },
    And { all: Vec<ContextPredicate> },
    Or { any: Vec<ContextPredicate> },
    Not { not: Box<ContextPredicate> },
}

impl ContextPredicate {
    /// Total over valid interactions: references to missing candidates or
    /// feature indices evaluate to false.
    pub fn matches(&self, x: &LoggedInteraction) -> bool {
        match self {
            ContextPredicate::Always => true,
            ContextPredicate::Feature {
                candidate,
                index,
                cmp,
                value,
            } => {
                let test = |c: &crate::domain::Candidate| {
                    c.features.get(*index).is_some_and(|&f| cmp.holds(f, *value))
                };
                match candidate {
                    CandidateScope::Any => x.candidates.iter().any(test),
                    CandidateScope::All => x.candidates.iter().all(test),
                    CandidateScope::Index(i) => x.candidates.get(*i).is_some_and(test),
                    CandidateScope::Id(id) => x
                        .candidates
                        .iter()
                        .find(|c| &c.candidate_id == id)
                        .is_some_and(test),
                }
            }
            ContextPredicate::CandidatePresent { ids } => {
                x.candidates.iter().any(|c| ids.contains(&c.candidate_id))
            }
            ContextPredicate::ContextId { glob } => glob.matches(&x.context_id),
            ContextPredicate::And { all } => all.iter().all(|p| p.matches(x)),
            ContextPredicate::Or { any } => any.iter().any(|p| p.matches(x)),
            ContextPredicate::Not { not } => !not.matches(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ActionPredicate {
    Any,
    CandidateIdIn { ids: BTreeSet<String> },
    IndexIn { indices: BTreeSet<usize> },
    Not { not: Box<ActionPredicate> },
}

impl ActionPredicate {
    pub fn matches(&self, x: &LoggedInteraction, action: usize) -> bool {
        match self {
            ActionPredicate::Any => true,
            ActionPredicate::CandidateIdIn { ids } => x
                .candidates
                .get(action)
                .is_some_and(|c| ids.contains(&c.candidate_id)),
            ActionPredicate::IndexIn { indices } => indices.contains(&action),
            ActionPredicate::Not { not } => !not.matches(x, action),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSelector {
    Id(String),
    Index(usize),
}

impl CandidateSelector {
    pub fn resolve(&self, x: &LoggedInteraction) -> Option<usize> {
        match self {
            CandidateSelector::Id(id) => x.candidates.iter().position(|c| &c.candidate_id == id),
            CandidateSelector::Index(i) => (*i < x.candidates.len()).then_some(*i),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotfixRule {
    pub rule_id: String,
    pub incident_id: String,
    pub context: ContextPredicate,
    pub action: ActionPredicate,
    pub override_action: CandidateSelector,
    #[serde(default = "default_true")]
    pub active: bool,
}

fn default_true() -> bool {
    true
}

impl HotfixRule {
    pub fn intercepts(&self, x: &LoggedInteraction, action: usize) -> bool {
        self.active && self.context.matches(x) && self.action.matches(x, action)
    }
}

/// Ordered rule list; the first intercepting rule wins.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HotfixRuleSet {
    rules: Vec<HotfixRule>,
}

#[derive(Serialize, Deserialize)]
struct RuleFile {
    schema: String,
    version: u32,
    rules: Vec<HotfixRule>,
}

impl HotfixRuleSet {
    pub fn new(rules: Vec<HotfixRule>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &rules {
            if !seen.insert(r.rule_id.as_str()) {
                return Err(Error::RuleConfig {
                    rule_id: r.rule_id.clone(),
                    message: "duplicate rule_id".into(),
                });
            }
        }
        Ok(Self { rules })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn rules(&self) -> &[HotfixRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Appends a rule at the lowest priority.
    pub fn with_rule(&self, rule: HotfixRule) -> Result<Self> {
        let mut rules = self.rules.clone();
        rules.push(rule);
        Self::new(rules)
    }

    pub fn first_intercepting(&self, x: &LoggedInteraction, action: usize) -> Option<&HotfixRule> {
        self.rules.iter().find(|r| r.intercepts(x, action))
    }

    /// True when no active rule's context predicate matches `x`.
    pub fn untouched(&self, x: &LoggedInteraction) -> bool {
        !self.rules.iter().any(|r| r.active && r.context.matches(x))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: RuleFile = serde_json::from_str(text)
            .map_err(|e| Error::Schema(format!("rule file: {e}")))?;
        if file.schema != RULES_SCHEMA || file.version != 1 {
            return Err(Error::Schema(format!(
                "expected {RULES_SCHEMA} v1, found {} v{}",
                file.schema, file.version
            )));
        }
        Self::new(file.rules)
    }

    pub fn render(&self) -> String {
        let file = RuleFile {
            schema: RULES_SCHEMA.to_string(),
            version: 1,
            rules: self.rules.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("rules serialize");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

fn check_action(x: &LoggedInteraction, action: usize) -> Result<()> {
    if action >= x.candidates.len() {
        return Err(Error::Invalid(format!(
            "action {action} out of range for {} candidates",
            x.candidates.len()
        )));
    }
    Ok(())
}

/// `g(X, a)`: false when some active rule would intercept `action` on `x`.
pub fn per_action_eligibility(rules: &HotfixRuleSet, x: &LoggedInteraction, action: usize) -> Result<bool> {
    check_action(x, action)?;
    Ok(rules.first_intercepting(x, action).is_none())
}

/// `G(Pi, X)`: eligibility of the policy's argmax action.
pub fn overall_eligibility(rules: &HotfixRuleSet, policy: &PolicySnapshot, x: &LoggedInteraction) -> Result<bool> {
    let p = policy.propensities(&x.candidates)?;
    per_action_eligibility(rules, x, argmax_action(&p)?)
}

/// `Q(X)` for an already computed propensity vector.
pub fn expected_eligibility_from(rules: &HotfixRuleSet, x: &LoggedInteraction, propensities: &[f64]) -> Result<f64> {
    if propensities.len() != x.candidates.len() {
        return Err(Error::Dimension {
            expected: x.candidates.len(),
            got: propensities.len(),
        });
    }
    let mut q = 0.0;
    for (i, &p) in propensities.iter().enumerate() {
        if per_action_eligibility(rules, x, i)? {
            q += p;
        }
    }
    Ok(q.clamp(0.0, 1.0))
}

pub fn expected_eligibility(rules: &HotfixRuleSet, policy: &PolicySnapshot, x: &LoggedInteraction) -> Result<f64> {
    let p = policy.propensities(&x.candidates)?;
    expected_eligibility_from(rules, x, &p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RoutingMode {
    /// The policy proposes its most likely action.
    #[default]
    Argmax,
    /// The policy proposes an action sampled from its propensities.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Handler {
    Policy,
    Hotfix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub action: usize,
    pub handler: Handler,
    /// 1.0 for hot-fix decisions, the policy propensity otherwise.
    pub propensity: f64,
    pub rule_id: Option<String>,
}

/// Combined router over precomputed propensities. The policy proposes an
/// action (argmax or sampled); if a rule intercepts it the first such rule's
/// override is served deterministically.
pub fn route_with_propensities<R: Rng + ?Sized>(
    rules: &HotfixRuleSet,
    x: &LoggedInteraction,
    propensities: &[f64],
    mode: RoutingMode,
    rng: &mut R,
) -> Result<RouteDecision> {
    let proposed = match mode {
        RoutingMode::Argmax => argmax_action(propensities)?,
        RoutingMode::Sample => sample_action(propensities, rng)?,
    };
    check_action(x, proposed)?;
    match rules.first_intercepting(x, proposed) {
        Some(rule) => {
            let action = rule.override_action.resolve(x).ok_or_else(|| Error::RuleConfig {
                rule_id: rule.rule_id.clone(),
                message: format!(
                    "override action {:?} is not among the candidates of `{}`",
                    rule.override_action, x.context_id
                ),
            })?;
            Ok(RouteDecision {
                action,
                handler: Handler::Hotfix,
                propensity: 1.0,
                rule_id: Some(rule.rule_id.clone()),
            })
        }
        None => Ok(RouteDecision {
            action: proposed,
            handler: Handler::Policy,
            propensity: propensities[proposed],
            rule_id: None,
        }),
    }
}

pub fn route<R: Rng + ?Sized>(
    rules: &HotfixRuleSet,
    policy: &PolicySnapshot,
    x: &LoggedInteraction,
    mode: RoutingMode,
    rng: &mut R,
) -> Result<RouteDecision> {
    let p = policy.propensities(&x.candidates)?;
    route_with_propensities(rules, x, &p, mode, rng)
}
