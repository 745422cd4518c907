use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rpguard_core::domain::{self, Candidate, InteractionSchema, LoggedInteraction};
use rpguard_core::evaluation::{self, ReportFormat, SampleEvaluation, SampleStatus};
use rpguard_core::guardrail::{self, gate_probabilities, BoundMode, GateConfig, GateOutcome, Verdict};
use rpguard_core::hotfix::{
    expected_eligibility_from, ActionPredicate, CandidateScope, CandidateSelector, Comparison, ContextPredicate,
    GlobPattern, HotfixRule, HotfixRuleSet,
};
use rpguard_core::metrics;
use rpguard_core::policy::{self, Activation, PolicyArchitecture, PolicySnapshot, PolicyVersion};
use rpguard_core::training::{combined_loss, combined_value_and_gradient, IpsExample, IpsLoss, RewardScale, RpPool};
use rpguard_core::{Dataset, EvaluationReport, LifecycleStatus, RpDataset, RpSample, SampleType, Severity, SplitTag};

const DIM: usize = 3;

fn unit() -> impl Strategy<Value = f64> {
    (1u32..=1000).prop_map(|k| f64::from(k) / 1000.0)
}

fn candidate(i: usize, dim: usize) -> impl Strategy<Value = Candidate> {
    prop::collection::vec(-5.0f64..5.0, dim).prop_map(move |features| Candidate {
        candidate_id: format!("skill-{i}"),
        features,
    })
}

fn interaction(dim: usize) -> impl Strategy<Value = LoggedInteraction> {
    (1usize..5)
        .prop_flat_map(move |n| {
            let cands: Vec<_> = (0..n).map(|i| candidate(i, dim)).collect();
            (cands, 0..n, unit(), 0.0f64..=1.0, 0u32..50)
        })
        .prop_map(|(candidates, chosen_action, logging_propensity, reward, ctx)| LoggedInteraction {
            context_id: format!("ctx-{ctx}"),
            candidates,
            chosen_action,
            logging_propensity,
            reward,
        })
}

fn rp_samples() -> impl Strategy<Value = Vec<RpSample>> {
    prop::collection::vec(
        (
            interaction(DIM),
            any::<bool>(),
            1u8..=5,
            any::<bool>(),
            0u32..400,
            "[a-z ]{0,12}",
        ),
        0..12,
    )
    .prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (interaction, regression, grade, active, day, description))| RpSample {
                uid: format!("u-{i}"),
                incident_id: format!("INC-{}", i % 3),
                sample_type: if regression { SampleType::Regression } else { SampleType::Progression },
                severity: Severity::new(grade).unwrap(),
                reported_date: chrono::NaiveDate::from_ymd_opt(2024, 1, 1).unwrap() + chrono::Days::new(u64::from(day)),
                lifecycle_status: if active { LifecycleStatus::Active } else { LifecycleStatus::Deprecated },
                description,
                interaction,
            })
            .collect()
    })
}

fn context_predicate() -> impl Strategy<Value = ContextPredicate> {
    let leaf = prop_oneof![
        Just(ContextPredicate::Always),
        (0usize..4, 0usize..DIM, -3.0f64..3.0).prop_map(|(i, index, value)| ContextPredicate::Feature {
            candidate: CandidateScope::Index(i),
            index,
            cmp: Comparison::Ge,
            value,
        }),
        (-3.0f64..3.0).prop_map(|value| ContextPredicate::Feature {
            candidate: CandidateScope::Any,
            index: 0,
            cmp: Comparison::Lt,
            value,
        }),
        (0u32..5).prop_map(|k| ContextPredicate::ContextId {
            glob: GlobPattern::new(&format!("ctx-{k}*")).unwrap(),
        }),
        prop::collection::btree_set("skill-[0-3]", 1..3).prop_map(|ids| ContextPredicate::CandidatePresent { ids }),
    ];
    leaf.prop_recursive(2, 8, 3, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 1..3).prop_map(|all| ContextPredicate::And { all }),
            prop::collection::vec(inner.clone(), 1..3).prop_map(|any| ContextPredicate::Or { any }),
            inner.prop_map(|p| ContextPredicate::Not { not: Box::new(p) }),
        ]
    })
}

fn action_predicate() -> impl Strategy<Value = ActionPredicate> {
    prop_oneof![
        Just(ActionPredicate::Any),
        prop::collection::btree_set(0usize..4, 0..4).prop_map(|indices| ActionPredicate::IndexIn { indices }),
        prop::collection::btree_set("skill-[0-3]", 0..3).prop_map(|ids| ActionPredicate::CandidateIdIn { ids }),
        prop::collection::btree_set(0usize..4, 0..3).prop_map(|indices| ActionPredicate::Not {
            not: Box::new(ActionPredicate::IndexIn { indices })
        }),
    ]
}

fn rule(id: usize) -> impl Strategy<Value = HotfixRule> {
    (context_predicate(), action_predicate(), 0usize..4, any::<bool>()).prop_map(move |(context, action, o, active)| {
        HotfixRule {
            rule_id: format!("r{id}"),
            incident_id: format!("INC-{id}"),
            context,
            action,
            override_action: if o % 2 == 0 {
                CandidateSelector::Index(o)
            } else {
                CandidateSelector::Id(format!("skill-{o}"))
            },
            active,
        }
    })
}

fn rules(max: usize) -> impl Strategy<Value = Vec<HotfixRule>> {
    (0..=max).prop_flat_map(|n| (0..n).map(rule).collect::<Vec<_>>())
}

fn propensities(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, n).prop_map(|raw| {
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    })
}

fn policy() -> impl Strategy<Value = PolicySnapshot> {
    (prop_oneof![Just(vec![3]), Just(vec![4, 2])], any::<u64>(), any::<bool>()).prop_map(|(hidden, seed, relu)| {
        let act = if relu { Activation::Relu } else { Activation::Tanh };
        PolicySnapshot::initialize_random(PolicyArchitecture::new(DIM, hidden, act), seed, true).unwrap()
    })
}

fn report_rows() -> impl Strategy<Value = Vec<SampleEvaluation>> {
    prop::collection::vec((any::<bool>(), any::<bool>(), 1u8..=5, 0.0f64..=1.0, 0.0f64..=1.0, propensities(3)), 0..10)
        .prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (fail, regression, grade, certainty, eligibility, p))| SampleEvaluation {
                    uid: format!("u-{i}"),
                    sample_type: if regression { SampleType::Regression } else { SampleType::Progression },
                    severity: Severity::new(grade).unwrap(),
                    status: if fail { SampleStatus::Fail } else { SampleStatus::Pass },
                    certainty,
                    eligibility,
                    replayed_argmax: policy::argmax_action(&p).unwrap(),
                    replayed_propensities: p,
                })
                .collect()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn interactions_round_trip(xs in prop::collection::vec(interaction(DIM), 0..20), validation in any::<bool>()) {
        let split = if validation { SplitTag::Validation } else { SplitTag::Train };
        let ds = Dataset::new(split, xs);
        let text = domain::render_interactions(&ds);
        let back = domain::parse_interactions(&text, InteractionSchema::default()).unwrap().value;
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(domain::render_interactions(&back), text);
    }

    #[test]
    fn rp_dataset_round_trip(samples in rp_samples()) {
        let ds = RpDataset::new(SplitTag::Test, samples).unwrap();
        let text = domain::render_rp_dataset(&ds);
        let back = domain::parse_rp_dataset(&text).unwrap().value;
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn rules_round_trip(rs in rules(5)) {
        let set = HotfixRuleSet::new(rs).unwrap();
        let back = HotfixRuleSet::parse(&set.render()).unwrap();
        prop_assert_eq!(back, set);
    }

    #[test]
    fn checkpoint_round_trip(p in policy()) {
        let bytes = policy::save_checkpoint(&p);
        let back = policy::load_checkpoint(&bytes).unwrap();
        prop_assert_eq!(policy::save_checkpoint(&back), bytes);
        prop_assert_eq!(back, p);
    }

    #[test]
    fn report_round_trip(rows in report_rows(), v in 0u64..1000) {
        let report = EvaluationReport::new(PolicyVersion(v), "2024-02-01T00:00:00Z".into(), rows);
        let back = evaluation::parse_structured_report(&evaluation::render_report(&report, ReportFormat::Structured)).unwrap();
        prop_assert_eq!(back, report);
    }

    #[test]
    fn eligibility_nonincreasing_under_rule_addition(
        x in interaction(DIM),
        rs in rules(4),
        extra in rule(9),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = {
            use rand::Rng;
            let raw: Vec<f64> = (0..x.candidates.len()).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let set = HotfixRuleSet::new(rs).unwrap();
        let q = expected_eligibility_from(&set, &x, &p).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&q));
        if let Ok(bigger) = set.with_rule(extra) {
            let q2 = expected_eligibility_from(&bigger, &x, &p).unwrap();
            prop_assert!(q2 <= q + 1e-12, "{} > {}", q2, q);
        }
        prop_assert!((expected_eligibility_from(&HotfixRuleSet::empty(), &x, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gate_bound_is_monotone(c in 0.0f64..=1.0, q in 0.0f64..=1.0, dc in 0.0f64..=1.0, dq in 0.0f64..=1.0, t in 0.0f64..=1.0) {
        for mode in [BoundMode::BestCase, BoundMode::WorstCase] {
            let (o1, b1) = gate_probabilities(c, q, t, mode).unwrap();
            let (c2, q2) = ((c + dc).min(1.0), (q + dq).min(1.0));
            let (o2, b2) = gate_probabilities(c2, q2, t, mode).unwrap();
            prop_assert!(b2 >= b1);
            if o1 == GateOutcome::GateFail {
                prop_assert_eq!(o2, GateOutcome::GateFail);
            }
            let (o3, _) = gate_probabilities(c, q, (t + dq).min(1.0), mode).unwrap();
            if o1 != GateOutcome::GateFail {
                prop_assert_ne!(o3, GateOutcome::GateFail);
            }
        }
        let (_, best) = gate_probabilities(c, q, t, BoundMode::BestCase).unwrap();
        let (_, worst) = gate_probabilities(c, q, t, BoundMode::WorstCase).unwrap();
        prop_assert!(best <= worst + 1e-12);
    }

    #[test]
    fn block_iff_some_row_fails(rows in report_rows(), t in 0.0f64..=1.0) {
        let report = EvaluationReport::new(PolicyVersion(1), "t".into(), rows);
        let v = guardrail::gate_report(&report, &GateConfig::with_threshold(t).unwrap()).unwrap();
        let any_fail = v.decisions.iter().any(|d| d.outcome == GateOutcome::GateFail);
        prop_assert_eq!(v.verdict == Verdict::Block, any_fail);
        prop_assert_eq!(v.offending_uids.len(), v.decisions.iter().filter(|d| d.outcome == GateOutcome::GateFail).count());
    }

    #[test]
    fn combined_loss_decomposes(
        p in policy(),
        regular in prop::collection::vec(interaction(DIM), 1..6),
        replay in prop::collection::vec(interaction(DIM), 1..6),
        eta in 0.01f64..0.99,
    ) {
        let loss = IpsLoss::default();
        let r: Vec<_> = regular.iter().map(IpsExample::logged).collect();
        let a: Vec<_> = replay.iter().map(IpsExample::logged).collect();
        let c = combined_value_and_gradient(&p, &loss, &r, &a, eta).unwrap();
        let (l0, g0) = loss.value_and_gradient(&p, &r).unwrap();
        let (l_rp, g_rp) = loss.value_and_gradient(&p, &a).unwrap();
        prop_assert_eq!(c.l0, l0);
        prop_assert_eq!(c.l_rp, l_rp);
        prop_assert!((c.l - ((1.0 - eta) * l0 + eta * l_rp)).abs() <= 1e-12 * (1.0 + c.l.abs()));
        prop_assert_eq!(c.l, combined_loss(l0, l_rp, eta).unwrap());
        for ((g, x), y) in c.gradient.iter().zip(&g0).zip(&g_rp) {
            prop_assert!((g - ((1.0 - eta) * x + eta * y)).abs() <= 1e-12 * (1.0 + g.abs()));
        }
    }

    #[test]
    fn deprecated_samples_are_never_replayed(samples in rp_samples(), seed in any::<u64>(), step in 0u64..100) {
        let ds = RpDataset::new(SplitTag::Train, samples).unwrap();
        let active: BTreeSet<&str> = ds.active().map(|s| s.uid.as_str()).collect();
        let pool = RpPool::new(&ds, RewardScale::default());
        prop_assert_eq!(pool.len(), active.len());
        let batch = pool.sample_batch(5, 4, 2.0, seed, step);
        prop_assert_eq!(batch.records.len(), if active.is_empty() { 0 } else { 20 });
        for r in &batch.records {
            prop_assert!(active.contains(r.uid.as_str()), "{} is not active", r.uid);
        }
    }

    #[test]
    fn replication_and_ips_ignore_order(
        p in policy(),
        xs in prop::collection::vec(interaction(DIM), 1..30),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let ds = Dataset::new(SplitTag::Validation, xs.clone());
        let mut shuffled = xs;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let sh = Dataset::new(SplitTag::Validation, shuffled);
        let (a, b) = (metrics::replication_rate(&p, &ds).unwrap().unwrap(), metrics::replication_rate(&p, &sh).unwrap().unwrap());
        prop_assert!((a - b).abs() <= 1e-9);
        let (a, b) = (metrics::ips_expected_reward(&p, &ds).unwrap(), metrics::ips_expected_reward(&p, &sh).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }
}

#[test]
fn replay_sources_are_uniform() {
    let samples: Vec<RpSample> = (0..8)
        .map(|i| RpSample {
            uid: format!("u-{i}"),
            incident_id: "INC-0".into(),
            sample_type: SampleType::Regression,
            severity: Severity::MOST_SEVERE,
            reported_date: chrono::NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
            lifecycle_status: LifecycleStatus::Active,
            description: String::new(),
            interaction: LoggedInteraction {
                context_id: format!("ctx-{i}"),
                candidates: vec![Candidate {
                    candidate_id: "skill-0".into(),
                    features: vec![0.0; DIM],
                }],
                chosen_action: 0,
                logging_propensity: 1.0,
                reward: 0.0,
            },
        })
        .collect();
    let ds = RpDataset::new(SplitTag::Train, samples).unwrap();
    let pool = RpPool::new(&ds, RewardScale::default());
    let mut counts = [0usize; 8];
    let steps = 8_000;
    for step in 0..steps {
        for r in pool.sample_batch(5, 1, 0.0, 17, step).records {
            counts[r.source] += 1;
        }
    }
    let n = (steps * 5) as f64;
    let expected = n / 8.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 7 degrees of freedom, 0.999 quantile.
    assert!(chi2 < 24.32, "chi-square {chi2} for counts {counts:?}");
}

/// With a single hidden layer the score is linear in the noisy hidden
/// vector, so the pairwise log-odds are unbiased under noise.
#[test]
fn noisy_log_odds_are_unbiased_for_a_linear_head() {
    let p = PolicySnapshot::initialize_random(PolicyArchitecture::new(DIM, vec![4], Activation::Tanh), 12, true).unwrap();
    let cands = vec![
        Candidate {
            candidate_id: "a".into(),
            features: vec![0.3, -0.8, 1.1],
        },
        Candidate {
            candidate_id: "b".into(),
            features: vec![-0.5, 0.4, 0.2],
        },
    ];
    let clean = p.propensities(&cands).unwrap();
    let target = (clean[0] / clean[1]).ln();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let q = p.forward(&cands, 2.0, &mut rng).unwrap();
            (q[0] / q[1]).ln()
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let se = (var / n as f64).sqrt();
    assert!((mean - target).abs() <= 4.0 * se, "mean {mean}, noise-free {target}, se {se}");
}
