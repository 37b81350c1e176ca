//! Short lexicographic DQN run on the cross map with the factored safety
//! head. Writes logs, the learning curve and a checkpoint to the directory
//! given as the first argument (default `runs/tldqn`).
//!
//! `cargo run --release --example train_tldqn -- runs/tldqn 20000`

use std::path::PathBuf;

use lexdrive::harness::{train, PolicyKind, RunConfig};
use lexdrive::tlq::SelectionMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/tldqn".into()));
    let mut cfg = RunConfig::default();
    cfg.budget = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10_000);
    cfg.curve.interval = (cfg.budget / 5).max(1);
    cfg.curve.episodes = 50;
    let outcome = train(&cfg, PolicyKind::Lexicographic, SelectionMode::Random, Some(&out))?;
    for p in &outcome.curve {
        println!("step {:>7}  combined {:.2}  smoothed {:.2}", p.step, p.combined, p.smoothed);
    }
    println!("checkpoint: {}", out.join("checkpoint.lxd").display());
    Ok(())
}
