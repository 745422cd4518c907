//! Shared fixtures for the benchmarks.

use chrono::NaiveDate;
use rpguard_core::scenario::{self, LogPart, ScenarioConfig};
use rpguard_core::{Dataset, LifecycleStatus, PolicySnapshot, RpDataset, RpSample, SampleType, Severity, SplitTag};

pub struct Fixture {
    pub policy: PolicySnapshot,
    pub logs: Dataset,
    pub rp: RpDataset,
}

/// A default-sized world with `n_logs` logged interactions, a randomly
/// initialized policy, and an R/P set made of the first `n_rp` logs.
pub fn fixture(n_logs: usize, n_rp: usize) -> Fixture {
    let config = ScenarioConfig::default();
    let world = scenario::generate_world(&config.world, 1).expect("default world");
    let logs = scenario::simulate_logs(&world, n_logs, 1, LogPart::Train).expect("logs");
    let policy = PolicySnapshot::initialize_random(config.architecture(), 1, true).expect("architecture");
    let samples = logs
        .interactions
        .iter()
        .take(n_rp)
        .enumerate()
        .map(|(i, x)| RpSample {
            uid: format!("u-{i}"),
            incident_id: format!("INC-{}", i % 4),
            sample_type: if i % 2 == 0 { SampleType::Regression } else { SampleType::Progression },
            severity: Severity::MOST_SEVERE,
            reported_date: NaiveDate::from_ymd_opt(2024, 1, 8).expect("date"),
            lifecycle_status: LifecycleStatus::Active,
            description: String::new(),
            interaction: x.clone(),
        })
        .collect();
    let rp = RpDataset::new(SplitTag::Train, samples).expect("unique uids");
    Fixture { policy, logs, rp }
}
