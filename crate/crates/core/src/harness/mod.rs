//! Training, evaluation, transfer and self-check runs.
//!
//! Actors run in lockstep on one thread: each round every actor takes one
//! environment step with the current online parameters, then the learner
//! applies `updates_per_round` updates. Runs are therefore reproducible
//! from their seeds alone.

mod episode;
mod oracle_check;
mod policy;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureConfig;
use crate::learner::{LearnerConfig, LearnerError};
use crate::momdp::MomdpError;
use crate::neural::HeadMode;
use crate::objectives::{ObjectiveConfig, ObjectiveError};
use crate::sim::{MapConfig, SimConfig, SimError};
use crate::tlq::{ExplorationSchedule, PolicyError};

pub use episode::{evaluate, Actor, EpisodeSummary, EvalOptions, ViolationReport};
pub use oracle_check::{run_oracle_check, Fault, OracleCheckConfig, OracleReport, PropertyResult, GUARANTEE, MIN_BIAS, NO_MIN, SETS_MATCH};
pub use policy::{build_objectives, objectives_from_bundle, Policy, PolicyKind};
pub use train::{save_checkpoint, train, CurvePoint, TrainOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Momdp(#[from] MomdpError),
    #[error("checkpoint does not fit this run: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Errors caused by bad input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_)
                | HarnessError::Parse(_)
                | HarnessError::Incompatible(_)
                | HarnessError::Objective(_)
                | HarnessError::Sim(SimError::Config(_) | SimError::Geometry(_))
                | HarnessError::Learner(LearnerError::Config(_) | LearnerError::Checkpoint(_))
        )
    }
}

/// Layer widths and head of one objective's network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSizes {
    pub shared: Vec<usize>,
    pub merged: Vec<usize>,
    pub head: HeadMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworksConfig {
    pub safety: NetSizes,
    pub regulation: NetSizes,
    /// Network of the scalar baseline.
    pub scalar: NetSizes,
}

impl Default for NetworksConfig {
    fn default() -> Self {
        NetworksConfig {
            safety: NetSizes { shared: vec![32, 32], merged: vec![32], head: HeadMode::FactoredMin },
            regulation: NetSizes { shared: vec![16], merged: vec![32], head: HeadMode::Monolithic },
            scalar: NetSizes { shared: vec![32, 32], merged: vec![32], head: HeadMode::Monolithic },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedConfig {
    /// Actor episode seeds and exploration draws.
    pub train: u64,
    /// Network initialization and replay sampling.
    pub init: u64,
    /// Evaluation episode `i` uses seed `eval + i`.
    pub eval: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig { train: 1, init: 2, eval: 1_000_000 }
    }
}

/// Periodic greedy evaluations recorded during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveConfig {
    /// Learner steps between evaluations; 0 disables the curve.
    pub interval: u64,
    pub episodes: usize,
    /// Number of evaluations averaged into the smoothed rate.
    pub window: usize,
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig { interval: 10_000, episodes: 100, window: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training scenario; `sim.map` is the training map.
    pub sim: SimConfig,
    /// Map used by transfer evaluation.
    pub transfer_map: MapConfig,
    pub features: FeatureConfig,
    pub objectives: ObjectiveConfig,
    pub networks: NetworksConfig,
    pub learner: LearnerConfig,
    pub actors: usize,
    pub updates_per_round: usize,
    /// Indexed by learner step.
    pub exploration: ExplorationSchedule,
    pub seeds: SeedConfig,
    /// Learner steps.
    pub budget: u64,
    pub eval_episodes: usize,
    pub curve: CurveConfig,
    /// Learner steps between checkpoints written to the output directory.
    pub checkpoint_every: u64,
    /// Learner steps between rows of the training log.
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sim: SimConfig::default(),
            transfer_map: MapConfig::ring(),
            features: FeatureConfig::default(),
            objectives: ObjectiveConfig::default(),
            networks: NetworksConfig::default(),
            learner: LearnerConfig::default(),
            actors: 4,
            updates_per_round: 1,
            exploration: ExplorationSchedule { start: 1.0, end: 0.05, anneal_steps: 100_000, level_weights: vec![0.0, 0.5, 0.25, 0.25] },
            seeds: SeedConfig::default(),
            budget: 200_000,
            eval_episodes: 500,
            curve: CurveConfig::default(),
            checkpoint_every: 50_000,
            log_every: 1_000,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Applies a `--seed` override to the training and init streams.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds.train = seed;
        self.seeds.init = seed.wrapping_add(1);
        self.learner.seed = seed.wrapping_add(2);
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.sim.validate()?;
        SimConfig::with_map(self.transfer_map.clone()).validate()?;
        self.objectives.validate()?;
        self.learner.validate()?;
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.actors == 0 || self.updates_per_round == 0 {
            return bad("actors and updates_per_round must be >= 1".into());
        }
        if self.budget == 0 || self.eval_episodes == 0 {
            return bad("budget and eval_episodes must be >= 1".into());
        }
        if self.features.slots == 0 || self.features.slots > FeatureConfig::WIDE_SLOTS {
            return bad(format!("features.slots {} not in 1..={}", self.features.slots, FeatureConfig::WIDE_SLOTS));
        }
        let e = &self.exploration;
        if !(0.0..=1.0).contains(&e.start) || !(0.0..=1.0).contains(&e.end) {
            return bad("exploration probabilities must be in [0, 1]".into());
        }
        if e.level_weights.len() != 4 || e.level_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("exploration.level_weights needs 4 non-negative entries".into());
        }
        if self.curve.interval > 0 && (self.curve.episodes == 0 || self.curve.window == 0) {
            return bad("curve episodes and window must be >= 1".into());
        }
        for (name, n) in [("safety", &self.networks.safety), ("regulation", &self.networks.regulation), ("scalar", &self.networks.scalar)] {
            if n.shared.is_empty() || n.shared.iter().chain(&n.merged).any(|w| *w == 0) {
                return bad(format!("networks.{name} needs a shared layer and non-zero widths"));
            }
        }
        if self.networks.regulation.head.is_factored() {
            return bad("the regulation view has no per-vehicle factors; use a monolithic head".into());
        }
        Ok(())
    }
}
