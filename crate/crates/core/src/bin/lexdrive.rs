use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lexdrive::harness::{
    evaluate, objectives_from_bundle, run_oracle_check, train, EvalOptions, HarnessError, OracleCheckConfig, Policy, PolicyKind,
    RunConfig, ViolationReport,
};
use lexdrive::learner::load_bundle;
use lexdrive::sim::SimConfig;
use lexdrive::tlq::SelectionMode;

#[derive(Parser)]
#[command(name = "lexdrive", version, about = "Lexicographic DQN driving agents on a small traffic simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the lexicographic agent on the training map.
    Train(Common),
    /// Evaluate a checkpoint on the training map.
    Evaluate(Common),
    /// Evaluate a checkpoint on the transfer map.
    TransferEval(Common),
    /// Compare the set solver against brute-force enumeration.
    OracleCheck(Common),
    /// Train the scalar-reward baseline.
    BaselineScalar(Common),
}

#[derive(Args)]
struct Common {
    /// Run config (TOML). Defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for logs, curves, checkpoints and reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluation episodes, or oracle-check instances.
    #[arg(long)]
    episodes: Option<usize>,
    /// Break ties by lowest action index instead of at random.
    #[arg(long)]
    deterministic: bool,
}

impl Common {
    fn mode(&self) -> SelectionMode {
        if self.deterministic {
            SelectionMode::Deterministic
        } else {
            SelectionMode::Random
        }
    }

    fn run_config(&self) -> Result<RunConfig, HarnessError> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

enum Failure {
    Usage(&'static str),
    Harness(HarnessError),
    Acceptance,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Harness(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Harness(e.into())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Harness(e.into())
    }
}

fn write_report(dir: &Path, report: &ViolationReport, episodes: &[lexdrive::harness::EpisodeSummary]) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)?;
    let name = format!("eval_{}.csv", report.map);
    let mut w = csv::Writer::from_path(dir.join(&name))?;
    w.write_record(ViolationReport::CSV_HEADER)?;
    w.write_record(report.csv_record())?;
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join(format!("episodes_{}.csv", report.map)))?;
    for e in episodes {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

fn run_evaluation(args: &Common, transfer: bool) -> Result<(), Failure> {
    let path = args.checkpoint.as_ref().ok_or(Failure::Usage("--checkpoint is required"))?;
    let bundle = load_bundle(path).map_err(HarnessError::from)?;
    // The stored config is the default; --config overrides it.
    let stored = bundle.meta.get("config").and_then(|c| c.as_str()).map(RunConfig::from_toml).transpose()?;
    let mut cfg = match (&args.config, stored) {
        (Some(_), _) | (None, None) => args.run_config()?,
        (None, Some(c)) => c,
    };
    if let Some(s) = args.seed {
        cfg.seeds.eval = s;
    }
    let (kind, objectives) = objectives_from_bundle(bundle, &cfg.features)?;
    let sim = if transfer { SimConfig { map: cfg.transfer_map.clone(), ..cfg.sim.clone() } } else { cfg.sim.clone() };
    let episodes = args.episodes.unwrap_or(cfg.eval_episodes);
    let opts = EvalOptions::for_map(&sim.map, episodes, cfg.seeds.eval, args.mode());
    let policy = Policy::new(kind, &objectives);
    let (report, summaries) = evaluate(&policy, &objectives, &sim, &cfg.features, &cfg.objectives, &opts)?;
    println!("{} ({})", report.table_row(), kind.name());
    if report.featurization_failures > 0 {
        println!("featurization failures: {}", report.featurization_failures);
    }
    if let Some(dir) = &args.out {
        write_report(dir, &report, &summaries)?;
    }
    Ok(())
}

fn run_training(args: &Common, kind: PolicyKind) -> Result<(), Failure> {
    let mut cfg = args.run_config()?;
    if let Some(n) = args.episodes {
        cfg.eval_episodes = n;
    }
    cfg.validate()?;
    let outcome = train(&cfg, kind, args.mode(), args.out.as_deref())?;
    let opts = EvalOptions::for_map(&cfg.sim.map, cfg.eval_episodes, cfg.seeds.eval, SelectionMode::Deterministic);
    let policy = Policy::new(kind, &outcome.learner.objectives);
    let (report, summaries) = evaluate(&policy, &outcome.learner.objectives, &cfg.sim, &cfg.features, &cfg.objectives, &opts)?;
    println!("{} after {} steps ({:.0}s)", report.table_row(), outcome.learner.steps(), outcome.seconds);
    if let Some(dir) = &args.out {
        write_report(dir, &report, &summaries)?;
    }
    Ok(())
}

fn run_oracle(args: &Common) -> Result<(), Failure> {
    let mut cfg = OracleCheckConfig::default();
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.episodes {
        cfg.instances = n;
    }
    let report = run_oracle_check(&cfg)?;
    println!("{report}");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("oracle_check.csv"))?;
        w.write_record(["property", "checked", "failed", "passed"])?;
        for p in &report.properties {
            w.write_record([p.name.to_string(), p.checked.to_string(), p.failed.to_string(), p.passed().to_string()])?;
        }
        w.flush()?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Acceptance)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(a) => run_training(a, PolicyKind::Lexicographic),
        Command::BaselineScalar(a) => run_training(a, PolicyKind::Scalar),
        Command::Evaluate(a) => run_evaluation(a, false),
        Command::TransferEval(a) => run_evaluation(a, true),
        Command::OracleCheck(a) => run_oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Acceptance) => {
            eprintln!("oracle check failed");
            ExitCode::from(3)
        }
        Err(Failure::Harness(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
