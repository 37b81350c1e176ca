//! Evaluates a checkpoint on the training map and on the transfer map.
//! Without an argument a small agent is trained first.
//!
//! `cargo run --release --example evaluate_transfer -- runs/tldqn/checkpoint.lxd`

use lexdrive::harness::{evaluate, objectives_from_bundle, train, EvalOptions, Policy, PolicyKind, RunConfig};
use lexdrive::learner::load_bundle;
use lexdrive::sim::SimConfig;
use lexdrive::tlq::SelectionMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (cfg, kind, objectives) = match std::env::args().nth(1) {
        Some(path) => {
            let bundle = load_bundle(path.as_ref())?;
            let cfg = RunConfig::from_toml(bundle.meta["config"].as_str().ok_or("checkpoint has no config")?)?;
            let (kind, objectives) = objectives_from_bundle(bundle, &cfg.features)?;
            (cfg, kind, objectives)
        }
        None => {
            let mut cfg = RunConfig::default();
            cfg.budget = 5_000;
            cfg.curve.interval = 0;
            let out = train(&cfg, PolicyKind::Lexicographic, SelectionMode::Random, None)?;
            (cfg, out.kind, out.learner.objectives)
        }
    };
    let policy = Policy::new(kind, &objectives);
    let transfer = SimConfig { map: cfg.transfer_map.clone(), ..cfg.sim.clone() };
    for sim in [&cfg.sim, &transfer] {
        let opts = EvalOptions::for_map(&sim.map, 100, cfg.seeds.eval, SelectionMode::Deterministic);
        let (report, _) = evaluate(&policy, &objectives, sim, &cfg.features, &cfg.objectives, &opts)?;
        println!("{}  featurization failures {}", report.table_row(), report.featurization_failures);
    }
    Ok(())
}
