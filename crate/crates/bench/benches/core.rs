use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rpguard_bench::fixture;
use rpguard_core::evaluation::{self, CertaintyRule, EvaluationOptions};
use rpguard_core::rng::{self, Purpose};
use rpguard_core::training::{IpsExample, IpsLoss, RewardScale, RpPool};
use rpguard_core::HotfixRuleSet;
use std::hint::black_box;

fn forward(c: &mut Criterion) {
    let f = fixture(64, 0);
    let x = &f.logs.interactions[0];
    c.bench_function("propensities", |b| b.iter(|| f.policy.propensities(black_box(&x.candidates)).unwrap()));
    c.bench_function("noisy_forward", |b| {
        b.iter_batched(
            || rng::stream(3, Purpose::Noise, 0),
            |mut r| f.policy.forward(black_box(&x.candidates), 2.0, &mut r).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn gradient(c: &mut Criterion) {
    let f = fixture(256, 100);
    let loss = IpsLoss { clip: Some(10.0) };
    let batch: Vec<_> = f.logs.interactions.iter().map(IpsExample::logged).collect();
    c.bench_function("ips_gradient_256", |b| b.iter(|| f.policy.gradient(&loss, black_box(&batch)).unwrap()));
    let pool = RpPool::new(&f.rp, RewardScale::default());
    let rp_batch = pool.sample_batch(5, 20, 2.0, 7, 0);
    let examples = pool.examples(&rp_batch);
    c.bench_function("rp_gradient_5x20", |b| b.iter(|| f.policy.gradient(&loss, black_box(&examples)).unwrap()));
}

fn evaluation(c: &mut Criterion) {
    let f = fixture(500, 500);
    let options = EvaluationOptions {
        certainty_rule: CertaintyRule::LoggedAction,
        ..EvaluationOptions::default()
    };
    let rules = HotfixRuleSet::empty();
    c.bench_function("evaluate_500", |b| {
        b.iter(|| evaluation::evaluate_dataset(&f.policy, &rules, black_box(&f.rp), &options).unwrap())
    });
}

criterion_group!(benches, forward, gradient, evaluation);
criterion_main!(benches);
