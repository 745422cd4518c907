//! Runs the synthetic lifecycle for one seed and prints the summary.
//!
//! `cargo run --release -p rpguard-core --example lifecycle -- 7 [config.toml]`

use rpguard_core::scenario::{run_lifecycle, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let config = match args.next() {
        Some(path) => ScenarioConfig::from_toml(&std::fs::read_to_string(path)?)?,
        None => ScenarioConfig::default(),
    };
    let run = run_lifecycle(&config, seed)?;
    println!("{}", serde_json::to_string_pretty(&run.summary)?);
    Ok(())
}
