//! `rpguard`: command-line driver for the R/P lifecycle.
//!
//! Every command reads its inputs, writes its outputs under `--out-dir` with a
//! per-command manifest, and logs to standard error. Exit status is 0 on
//! success, 1 on error (a JSON error record is printed to standard error), 2
//! on usage errors and 3 when `gate` blocks a deployment.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tracing_subscriber::EnvFilter;

use rpguard_core::domain::{self, InteractionSchema};
use rpguard_core::evaluation::{self, EvaluationOptions, ReportFormat};
use rpguard_core::guardrail::{self, BoundMode, GateConfig};
use rpguard_core::metrics::{self, BootstrapConfig};
use rpguard_core::policy::{self, PolicySnapshot};
use rpguard_core::rng::{self, Purpose};
use rpguard_core::scenario::{self, LogPart, RunDirectory, ScenarioConfig, SyntheticWorld};
use rpguard_core::training::{self, OptimizerKind};
use rpguard_core::{CertaintyRule, Error, HotfixRuleSet, Verdict};

const BLOCK_EXIT: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "rpguard", version, about = "Off-policy R/P lifecycle: train, hot-fix, evaluate, gate, remediate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for every random stream the command uses.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, env = "RPGUARD_OUT_DIR", default_value = "rpguard-out")]
    out_dir: PathBuf,
    /// Scenario TOML file. Flags override values from the file, which
    /// override built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to one per core). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic routing world (world.json).
    GenWorld {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate logged interactions from a world (logs/<part>.jsonl).
    GenLogs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        world: PathBuf,
        /// Number of interactions [default: the config's count for the part].
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum, default_value_t = Part::Train)]
        part: Part,
    },
    /// Craft R/P samples and hot-fix rules for the defects a policy shows.
    CraftIncidents {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        world: PathBuf,
        /// Baseline checkpoint.
        #[arg(long)]
        policy: PathBuf,
    },
    /// Train a policy; with --rp-dataset the R/P auxiliary loss is added.
    Train(TrainArgs),
    /// Replay a checkpoint on an R/P set and write the evaluation report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        rp_dataset: PathBuf,
        /// Hot-fix rules used for eligibility [default: none].
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Certainty of failed progressions and passed regressions
        /// [default: literal, or the config's value].
        #[arg(long, value_enum)]
        certainty_rule: Option<Certainty>,
        /// Report timestamp [default: 1970-01-01T00:00:00Z].
        #[arg(long)]
        timestamp: Option<String>,
        /// Report file stem under reports/.
        #[arg(long, default_value = "report")]
        name: String,
    },
    /// Gate a structured report; exits with status 3 on BLOCK.
    Gate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        report: PathBuf,
        /// T_f [default: 0.5, or the config's value].
        #[arg(long)]
        failure_threshold: Option<f64>,
        #[arg(long, value_enum)]
        bound: Option<Bound>,
        #[arg(long, default_value = "gate")]
        name: String,
    },
    /// Compare two checkpoints: replication, expected reward, deviation and,
    /// given R/P data, remediation percentage.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        new: PathBuf,
        /// Logged interactions for replication and IPS reward.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, requires = "rules")]
        rp_dataset: Option<PathBuf>,
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Bootstrap resamples [default: 10000].
        #[arg(long)]
        resamples: Option<usize>,
    },
    /// Run the whole lifecycle on the synthetic scenario.
    Lifecycle {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Logged interactions.
    #[arg(long)]
    data: PathBuf,
    /// Validation interactions for per-epoch metrics.
    #[arg(long)]
    validation: Option<PathBuf>,
    /// R/P samples for the auxiliary loss.
    #[arg(long)]
    rp_dataset: Option<PathBuf>,
    /// Starting checkpoint [default: fresh initialization from --seed].
    #[arg(long)]
    init: Option<PathBuf>,
    /// Loss mix ratio eta [default: 0.2].
    #[arg(long)]
    eta: Option<f64>,
    /// R/P samples per batch alpha [default: 5].
    #[arg(long)]
    alpha: Option<usize>,
    /// Augmentations per R/P sample beta [default: 20].
    #[arg(long)]
    beta: Option<usize>,
    /// Hidden-representation noise scale lambda [default: 2.0].
    #[arg(long)]
    lambda: Option<f64>,
    /// [default: 15]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 256]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 0.05]
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<Optimizer>,
    /// Cap on importance ratios [default: 10].
    #[arg(long)]
    ips_clip: Option<f64>,
    /// Output directory stem for checkpoints and logs.
    #[arg(long, default_value = "policy")]
    name: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Validation,
    Holdout,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Certainty {
    Literal,
    LoggedAction,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Bound {
    BestCase,
    WorstCase,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Optimizer {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Output of a command: artifacts to write and whether it blocked.
struct Output {
    dir: RunDirectory,
    manifest: &'static str,
    blocked: bool,
}

impl Output {
    fn new(manifest: &'static str) -> Self {
        Self {
            dir: RunDirectory::default(),
            manifest,
            blocked: false,
        }
    }
}

fn load_config(common: &Common) -> CliResult<ScenarioConfig> {
    match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            Ok(ScenarioConfig::from_toml(&text)?)
        }
        None => Ok(ScenarioConfig::default()),
    }
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    Ok(fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?)
}

fn read_text(path: &Path) -> CliResult<String> {
    Ok(fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?)
}

fn load_policy(path: &Path) -> CliResult<PolicySnapshot> {
    Ok(policy::load_checkpoint(&read_bytes(path)?)?)
}

fn load_world(path: &Path) -> CliResult<SyntheticWorld> {
    Ok(SyntheticWorld::load(path)?)
}

fn load_rules(path: Option<&Path>) -> CliResult<HotfixRuleSet> {
    match path {
        Some(p) => Ok(HotfixRuleSet::load(p)?),
        None => Ok(HotfixRuleSet::empty()),
    }
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        tracing::warn!("{w}");
    }
}

fn json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable") + "\n"
}

fn gen_world(common: &Common) -> CliResult<Output> {
    let config = load_config(common)?;
    let world = scenario::generate_world(&config.world, common.seed)?;
    tracing::info!(clusters = world.n_clusters(), actions = world.n_actions(), defects = world.defects.len(), "world generated");
    let mut out = Output::new("gen-world.manifest.json");
    out.dir.add_json("world.json", &world);
    Ok(out)
}

fn gen_logs(common: &Common, world: &Path, n: Option<usize>, part: Part) -> CliResult<Output> {
    let config = load_config(common)?;
    let world = load_world(world)?;
    let (log_part, default_n, stem) = match part {
        Part::Train => (LogPart::Train, config.n_train_logs, "train"),
        Part::Validation => (LogPart::Validation, config.n_validation_logs, "validation"),
        Part::Holdout => (LogPart::Holdout, config.n_holdout_logs, "holdout"),
    };
    let logs = scenario::simulate_logs(&world, n.unwrap_or(default_n), common.seed, log_part)?;
    tracing::info!(n = logs.len(), part = stem, "logs simulated");
    let mut out = Output::new("gen-logs.manifest.json");
    out.dir.add(format!("logs/{stem}.jsonl"), domain::render_interactions(&logs));
    Ok(out)
}

fn craft(common: &Common, world: &Path, policy_path: &Path) -> CliResult<Output> {
    let config = load_config(common)?;
    let world = load_world(world)?;
    let baseline = load_policy(policy_path)?;
    let incidents = scenario::craft_incidents(&world, &baseline, &config.incidents, common.seed)?;
    if incidents.is_empty() {
        return Err(Error::Empty("manifested defects").into());
    }
    let mut split_rng = rng::stream(common.seed, Purpose::Split, 0);
    let (train, test) = domain::split_by_incident(incidents.rp.samples.clone(), config.rp_train_fraction, &mut split_rng)?;
    let summary = domain::validate_rp_split(&train, &test)?;
    warn_all(&summary.warnings);
    tracing::info!(incidents = incidents.manifested.len(), train = train.len(), test = test.len(), "incidents crafted");
    let mut out = Output::new("craft-incidents.manifest.json");
    out.dir.add("rp/train.jsonl", domain::render_rp_dataset(&train));
    out.dir.add("rp/test.jsonl", domain::render_rp_dataset(&test));
    out.dir.add("hotfix_rules.json", incidents.rules.render());
    Ok(out)
}

fn train(args: &TrainArgs) -> CliResult<Output> {
    let config = load_config(&args.common)?;
    let mut tc = config.training.clone();
    tc.seed = args.common.seed;
    if let Some(v) = args.eta {
        tc.eta = v;
    }
    if let Some(v) = args.alpha {
        tc.alpha = v;
    }
    if let Some(v) = args.beta {
        tc.beta = v;
    }
    if let Some(v) = args.lambda {
        tc.lambda = v;
    }
    if let Some(v) = args.epochs {
        tc.epochs = v;
    }
    if let Some(v) = args.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        tc.learning_rate = v;
    }
    if let Some(v) = args.ips_clip {
        tc.ips_clip = Some(v);
    }
    if let Some(o) = args.optimizer {
        tc.optimizer = match o {
            Optimizer::Sgd => OptimizerKind::Sgd,
            Optimizer::Momentum => OptimizerKind::SgdMomentum,
            Optimizer::Adam => OptimizerKind::Adaptive,
        };
    }
    let data = domain::load_interactions(&args.data, InteractionSchema::default())?;
    warn_all(&data.warnings);
    let data = data.value;
    let validation = match &args.validation {
        Some(p) => {
            let v = domain::load_interactions(p, InteractionSchema { feature_dim: data.feature_dim })?;
            warn_all(&v.warnings);
            Some(v.value)
        }
        None => None,
    };
    let rp = match &args.rp_dataset {
        Some(p) => {
            let r = domain::load_rp_dataset(p)?;
            warn_all(&r.warnings);
            Some(r.value)
        }
        None => None,
    };
    let init = match &args.init {
        Some(p) => load_policy(p)?,
        None => {
            let mut arch = config.architecture();
            arch.feature_dim = data
                .feature_dim
                .ok_or_else(|| CliError::Usage("training data has no candidates".into()))?;
            PolicySnapshot::initialize(arch, args.common.seed)?
        }
    };
    tracing::info!(
        n = data.len(),
        rp = rp.as_ref().map(|r| r.len()),
        eta = tc.eta,
        alpha = tc.alpha,
        beta = tc.beta,
        lambda = tc.lambda,
        "training"
    );
    let outcome = training::train(&init, &data, rp.as_ref(), &tc, validation.as_ref())?;
    warn_all(&outcome.warnings);
    let mut out = Output::new("train.manifest.json");
    let name = &args.name;
    for (i, s) in outcome.snapshots.iter().enumerate() {
        out.dir.add(format!("{name}/epoch-{:03}.ckpt", i + 1), policy::save_checkpoint(s));
    }
    out.dir.add(format!("{name}/final.ckpt"), policy::save_checkpoint(outcome.final_policy()));
    out.dir.add(format!("{name}/steps.jsonl"), outcome.steps.iter().map(json_line).collect::<String>());
    out.dir.add(format!("{name}/epochs.jsonl"), outcome.epochs.iter().map(json_line).collect::<String>());
    out.dir.add_json(&format!("{name}/training_config.json"), &tc);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    common: &Common,
    policy_path: &Path,
    rp_path: &Path,
    rules: Option<&Path>,
    certainty: Option<Certainty>,
    timestamp: Option<&str>,
    name: &str,
) -> CliResult<Output> {
    let config = common.config.as_ref().map(|_| load_config(common)).transpose()?;
    let policy = load_policy(policy_path)?;
    let rp = domain::load_rp_dataset(rp_path)?;
    warn_all(&rp.warnings);
    let rules = load_rules(rules)?;
    let certainty_rule = match certainty {
        Some(Certainty::Literal) => CertaintyRule::Literal,
        Some(Certainty::LoggedAction) => CertaintyRule::LoggedAction,
        None => config.as_ref().map_or(CertaintyRule::Literal, |c| c.certainty_rule),
    };
    let options = EvaluationOptions {
        certainty_rule,
        timestamp: timestamp.map_or_else(|| evaluation::DEFAULT_TIMESTAMP.to_string(), str::to_string),
    };
    let report = evaluation::evaluate_dataset(&policy, &rules, &rp.value, &options)?;
    let table = evaluation::render_report(&report, ReportFormat::Table);
    print!("{table}");
    let mut out = Output::new("evaluate.manifest.json");
    out.dir.add(format!("reports/{name}.jsonl"), evaluation::render_report(&report, ReportFormat::Structured));
    out.dir.add(format!("reports/{name}.txt"), table);
    Ok(out)
}

fn gate(common: &Common, report: &Path, threshold: Option<f64>, bound: Option<Bound>, name: &str) -> CliResult<Output> {
    let mut gc: GateConfig = match &common.config {
        Some(_) => load_config(common)?.gate,
        None => GateConfig::default(),
    };
    if let Some(t) = threshold {
        gc.failure_threshold = t;
    }
    if let Some(b) = bound {
        gc.bound = match b {
            Bound::BestCase => BoundMode::BestCase,
            Bound::WorstCase => BoundMode::WorstCase,
        };
    }
    let report = evaluation::parse_structured_report(&read_text(report)?)?;
    let verdict = guardrail::gate_report(&report, &gc)?;
    println!(
        "{:?}: {} of {} rows fail at T_f = {}",
        verdict.verdict,
        verdict.offending_uids.len(),
        verdict.decisions.len(),
        verdict.failure_threshold
    );
    for (uid, b) in verdict.offending_uids.iter().zip(&verdict.bounds) {
        println!("  {uid}  bound {b:.4}");
    }
    let mut out = Output::new("gate.manifest.json");
    out.blocked = verdict.verdict == Verdict::Block;
    out.dir.add_json(&format!("gates/{name}.json"), &verdict);
    Ok(out)
}

#[derive(Serialize)]
struct MetricsRecord {
    comparison: metrics::PolicyComparison,
    remediation: Option<metrics::Remediation>,
}

#[allow(clippy::too_many_arguments)]
fn metrics_cmd(
    common: &Common,
    baseline: &Path,
    new: &Path,
    data: &Path,
    rp_path: Option<&Path>,
    rules: Option<&Path>,
    resamples: Option<usize>,
) -> CliResult<Output> {
    let config = load_config(common)?;
    let base = load_policy(baseline)?;
    let new = load_policy(new)?;
    let data = domain::load_interactions(data, InteractionSchema::default())?;
    warn_all(&data.warnings);
    let boot = BootstrapConfig {
        resamples: resamples.unwrap_or(config.bootstrap_resamples),
        seed: common.seed,
    };
    let comparison = metrics::compare_policies(&base, &new, &data.value, boot)?;
    let mut text = metrics::render_comparison(&comparison);
    let remediation = match rp_path {
        Some(p) => {
            let rp = domain::load_rp_dataset(p)?;
            warn_all(&rp.warnings);
            let rules = load_rules(rules)?;
            let options = EvaluationOptions {
                certainty_rule: config.certainty_rule,
                timestamp: evaluation::DEFAULT_TIMESTAMP.to_string(),
            };
            let before = evaluation::evaluate_dataset(&base, &rules, &rp.value, &options)?;
            let after = evaluation::evaluate_dataset(&new, &rules, &rp.value, &options)?;
            let r = metrics::remediation_percentage(&before, &after)?;
            text.push_str(&format!(
                "Remediation: {} (regression {}, progression {}), failures {} -> {}\n",
                r.overall, r.regression, r.progression, r.fail_baseline, r.fail_new
            ));
            Some(r)
        }
        None => None,
    };
    print!("{text}");
    let mut out = Output::new("metrics.manifest.json");
    out.dir.add("metrics/comparison.txt", text);
    out.dir.add_json("metrics/metrics.json", &MetricsRecord { comparison, remediation });
    Ok(out)
}

fn lifecycle(common: &Common) -> CliResult<Output> {
    let config = load_config(common)?;
    let run = scenario::run_lifecycle(&config, common.seed)?;
    warn_all(&run.summary.warnings);
    let s = &run.summary;
    println!("incidents: {}", s.n_incidents);
    println!("remediation (R/P train): {}", s.remediation_train.overall);
    println!("remediation (R/P test):  {}", s.remediation_test.overall);
    println!(
        "gate with hot-fixes: baseline {:?}, remediated {:?}",
        s.baseline.gate_with_hotfixes.verdict, s.remediated.gate_with_hotfixes.verdict
    );
    println!(
        "gate without hot-fixes: baseline {:?}, remediated {:?}",
        s.baseline.gate_without_hotfixes.verdict, s.remediated.gate_without_hotfixes.verdict
    );
    print!("{}", metrics::render_comparison(&s.holdout));
    Ok(Output {
        dir: run.artifacts,
        manifest: "manifest.json",
        blocked: false,
    })
}

/// Refuses to overwrite any input file.
fn check_inputs(out_dir: &Path, dir: &RunDirectory, inputs: &[&Path]) -> CliResult<()> {
    let inputs: Vec<PathBuf> = inputs.iter().filter_map(|p| fs::canonicalize(p).ok()).collect();
    for rel in dir.files().keys() {
        let target = out_dir.join(rel);
        if let Ok(c) = fs::canonicalize(&target) {
            if inputs.contains(&c) {
                return Err(CliError::Usage(format!("refusing to overwrite input {}", target.display())));
            }
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<(Output, Common)> {
    let (out, common, inputs): (Output, &Common, Vec<&Path>) = match &cli.command {
        Command::GenWorld { common } => (gen_world(common)?, common, vec![]),
        Command::GenLogs { common, world, n, part } => (gen_logs(common, world, *n, *part)?, common, vec![world.as_path()]),
        Command::CraftIncidents { common, world, policy } => {
            (craft(common, world, policy)?, common, vec![world.as_path(), policy.as_path()])
        }
        Command::Train(args) => {
            let mut inputs = vec![args.data.as_path()];
            inputs.extend(args.validation.as_deref());
            inputs.extend(args.rp_dataset.as_deref());
            inputs.extend(args.init.as_deref());
            (train(args)?, &args.common, inputs)
        }
        Command::Evaluate {
            common,
            policy,
            rp_dataset,
            rules,
            certainty_rule,
            timestamp,
            name,
        } => {
            let out = evaluate(common, policy, rp_dataset, rules.as_deref(), *certainty_rule, timestamp.as_deref(), name)?;
            let mut inputs = vec![policy.as_path(), rp_dataset.as_path()];
            inputs.extend(rules.as_deref());
            (out, common, inputs)
        }
        Command::Gate {
            common,
            report,
            failure_threshold,
            bound,
            name,
        } => (gate(common, report, *failure_threshold, *bound, name)?, common, vec![report.as_path()]),
        Command::Metrics {
            common,
            baseline,
            new,
            data,
            rp_dataset,
            rules,
            resamples,
        } => {
            let out = metrics_cmd(common, baseline, new, data, rp_dataset.as_deref(), rules.as_deref(), *resamples)?;
            let mut inputs = vec![baseline.as_path(), new.as_path(), data.as_path()];
            inputs.extend(rp_dataset.as_deref());
            inputs.extend(rules.as_deref());
            (out, common, inputs)
        }
        Command::Lifecycle { common } => (lifecycle(common)?, common, vec![]),
    };
    let mut inputs = inputs;
    inputs.extend(common.config.as_deref());
    check_inputs(&common.out_dir, &out.dir, &inputs)?;
    let manifest = out.dir.write_with_manifest(&common.out_dir, common.seed, out.manifest)?;
    tracing::info!(manifest = %manifest.display(), files = out.dir.files().len(), "outputs written");
    Ok((out, common.clone()))
}

fn common(cli: &Cli) -> &Common {
    match &cli.command {
        Command::GenWorld { common }
        | Command::GenLogs { common, .. }
        | Command::CraftIncidents { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Gate { common, .. }
        | Command::Metrics { common, .. }
        | Command::Lifecycle { common } => common,
        Command::Train(args) => &args.common,
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    if let Some(n) = common(&cli).threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            tracing::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok((out, _)) if out.blocked => ExitCode::from(BLOCK_EXIT),
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            let record = ErrorRecord {
                error: e.kind(),
                message: e.to_string(),
            };
            eprintln!("{}", serde_json::to_string(&record).expect("serializable"));
            ExitCode::FAILURE
        }
    }
}
