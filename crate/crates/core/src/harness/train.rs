use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::episode::{evaluate, map_name, Actor, EvalOptions};
use super::policy::{build_objectives, Policy, PolicyKind};
use super::{HarnessError, RunConfig};
use crate::learner::{save_bundle, Learner, QObjective, TrainReport};
use crate::tlq::SelectionMode;

/// One periodic evaluation during training.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub collision: f64,
    pub yielding: f64,
    pub turning: f64,
    pub combined: f64,
    /// Mean combined rate over the last `curve.window` evaluations.
    pub smoothed: f64,
    pub smoothed_sq: f64,
}

pub struct TrainOutcome {
    pub kind: PolicyKind,
    pub learner: Learner,
    pub curve: Vec<CurvePoint>,
    pub env_steps: u64,
    pub episodes: u64,
    pub seconds: f64,
}

impl TrainOutcome {
    /// First learner step whose smoothed rate is at or below `rate`.
    pub fn steps_to_reach(&self, rate: f64) -> Option<u64> {
        self.curve.iter().find(|p| p.smoothed <= rate + 1e-12).map(|p| p.step)
    }

    pub fn final_smoothed(&self) -> Option<f64> {
        self.curve.last().map(|p| p.smoothed)
    }
}

/// Writes `objectives` with the run description needed to rebuild the policy.
pub fn save_checkpoint(path: &Path, kind: PolicyKind, objectives: &[QObjective], steps: u64, cfg: &RunConfig) -> Result<(), HarnessError> {
    let meta = serde_json::json!({ "policy": kind.name(), "config": cfg.to_toml() });
    save_bundle(path, objectives, steps, &meta)?;
    Ok(())
}

struct LogAccumulator {
    n: u64,
    losses: Vec<f64>,
    tds: Vec<f64>,
    skipped: u64,
}

impl LogAccumulator {
    fn new(k: usize) -> Self {
        LogAccumulator { n: 0, losses: vec![0.0; k], tds: vec![0.0; k], skipped: 0 }
    }

    fn add(&mut self, r: &TrainReport) {
        self.n += 1;
        for i in 0..self.losses.len() {
            self.losses[i] += r.losses[i];
            self.tds[i] += r.mean_abs_td[i];
        }
        self.skipped += r.skipped.iter().filter(|s| **s).count() as u64;
    }

    fn record(&mut self, step: u64, env_steps: u64, episodes: u64) -> Vec<String> {
        let n = self.n.max(1) as f64;
        let mut row = vec![step.to_string(), env_steps.to_string(), episodes.to_string()];
        row.extend(self.losses.iter().map(|l| format!("{:.6e}", l / n)));
        row.extend(self.tds.iter().map(|t| format!("{:.6e}", t / n)));
        row.push(self.skipped.to_string());
        *self = LogAccumulator::new(self.losses.len());
        row
    }
}

struct Outputs {
    dir: PathBuf,
    log: csv::Writer<File>,
    curve: csv::Writer<File>,
}

fn seed_mix(base: u64, i: u64) -> u64 {
    base ^ (i.wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Trains `kind` for `cfg.budget` learner steps. With `out`, writes
/// `train_log.csv`, `curve.csv` and periodic `checkpoint.lxd` there.
pub fn train(cfg: &RunConfig, kind: PolicyKind, mode: SelectionMode, out: Option<&Path>) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.init);
    let objectives = build_objectives(cfg, kind, &mut init_rng)?;
    let policy = Policy::new(kind, &objectives);
    let names: Vec<String> = objectives.iter().map(|o| o.name.clone()).collect();
    let mut learner = Learner::new(objectives, cfg.learner.clone())?;
    let mut actors = (0..cfg.actors as u64)
        .map(|a| Actor::new(cfg.sim.clone(), seed_mix(cfg.seeds.train, a)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(cfg.seeds.train, u64::MAX));

    let mut outputs = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut log = csv::Writer::from_path(dir.join("train_log.csv"))?;
            let mut header = vec!["step".to_string(), "env_steps".into(), "episodes".into()];
            header.extend(names.iter().map(|n| format!("loss_{n}")));
            header.extend(names.iter().map(|n| format!("td_{n}")));
            header.push("skipped".into());
            log.write_record(&header)?;
            log.flush()?;
            let curve = csv::Writer::from_path(dir.join("curve.csv"))?;
            Some(Outputs { dir: dir.to_path_buf(), log, curve })
        }
        None => None,
    };

    let eval_opts = EvalOptions::for_map(&cfg.sim.map, cfg.curve.episodes, cfg.seeds.eval, SelectionMode::Deterministic);
    let mut curve: Vec<CurvePoint> = Vec::new();
    let (mut env_steps, mut episodes) = (0u64, 0u64);
    let mut acc = LogAccumulator::new(names.len());

    let record_curve = |learner: &Learner, env_steps: u64, episodes: u64, curve: &mut Vec<CurvePoint>, outputs: &mut Option<Outputs>| -> Result<(), HarnessError> {
        let (r, _) = evaluate(&policy, &learner.objectives, &cfg.sim, &cfg.features, &cfg.objectives, &eval_opts)?;
        let mut window: Vec<f64> = curve.iter().rev().take(cfg.curve.window - 1).map(|p| p.combined).collect();
        window.push(r.combined_rate());
        let smoothed = window.iter().sum::<f64>() / window.len() as f64;
        let p = CurvePoint {
            step: learner.steps(),
            env_steps,
            episodes,
            collision: r.collision_rate(),
            yielding: r.yielding_rate(),
            turning: r.turning_rate().unwrap_or(0.0),
            combined: r.combined_rate(),
            smoothed,
            smoothed_sq: smoothed * smoothed,
        };
        log::info!(
            "{} step {:>7} env {:>8} | {} | smoothed {:.3} | {:.0}s",
            kind.name(),
            p.step,
            env_steps,
            r.table_row(),
            smoothed,
            started.elapsed().as_secs_f64()
        );
        if let Some(o) = outputs {
            o.curve.serialize(&p)?;
            o.curve.flush()?;
        }
        curve.push(p);
        Ok(())
    };

    if cfg.curve.interval > 0 {
        record_curve(&learner, 0, 0, &mut curve, &mut outputs)?;
    }
    while learner.steps() < cfg.budget {
        for actor in actors.iter_mut() {
            let explore = cfg.exploration.draw(learner.steps(), &mut rng);
            let step = actor.step(&policy, &learner.objectives, &cfg.features, &cfg.objectives, explore, mode, &mut rng)?;
            if let Some(t) = step.transition {
                learner.push(t)?;
            }
            env_steps += 1;
            if let Some(done) = step.finished {
                episodes += 1;
                if done.featurization_failure {
                    log::warn!("training episode {} ended on a featurization failure", done.seed);
                }
            }
        }
        if !learner.ready() {
            continue;
        }
        for _ in 0..cfg.updates_per_round {
            let before = learner.steps();
            let Some(report) = learner.train_step()? else { break };
            acc.add(&report);
            let step = learner.steps();
            debug_assert_eq!(step, before + 1);
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                let row = acc.record(step, env_steps, episodes);
                if let Some(o) = outputs.as_mut() {
                    o.log.write_record(&row)?;
                    o.log.flush()?;
                }
            }
            if cfg.curve.interval > 0 && step % cfg.curve.interval == 0 {
                record_curve(&learner, env_steps, episodes, &mut curve, &mut outputs)?;
            }
            if let Some(o) = outputs.as_ref() {
                if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                    save_checkpoint(&o.dir.join("checkpoint.lxd"), kind, &learner.objectives, step, cfg)?;
                }
            }
            if step >= cfg.budget {
                break;
            }
        }
    }
    if let Some(o) = outputs.as_ref() {
        save_checkpoint(&o.dir.join("checkpoint.lxd"), kind, &learner.objectives, learner.steps(), cfg)?;
    }
    log::info!(
        "{} on {}: {} learner steps, {} env steps, {} episodes in {:.0}s",
        kind.name(),
        map_name(cfg.sim.map.kind),
        learner.steps(),
        env_steps,
        episodes,
        started.elapsed().as_secs_f64()
    );
    Ok(TrainOutcome { kind, learner, curve, env_steps, episodes, seconds: started.elapsed().as_secs_f64() })
}
