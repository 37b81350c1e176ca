//! Deep thresholded lexicographic Q-learning: one double-DQN learner per
//! objective, trained jointly from a shared prioritized replay buffer.
//!
//! Objective `i` bootstraps from the restricted argmax of its online network
//! over `A_{i-1}(s')`, evaluated by its target network. The chain of
//! admissible sets at `s'` starts from the transition's `next_prior` (the
//! rule-based levels above the learned ones) and is recomputed from the
//! online networks at training time.

mod checkpoint;
pub mod replay;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::Encoded;
use crate::neural::{apply_update, AdamConfig, AdamState, Forward, NetInput, Network, NetworkSpec, NeuralError, Parameters};
use crate::objectives::FactoredStep;
use crate::tlq::{admissible_set, restricted_argmax, ActionSet, PolicyError};

pub use checkpoint::{load_bundle, read_bundle, save_bundle, write_bundle, Bundle, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use replay::{PrioritizedReplay, ReplayConfig, SampledBatch, SumTree};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid learner config: {0}")]
    Config(String),
    #[error("transition does not match the learner: {0}")]
    Transition(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One state as seen by one objective's network, stored in `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedState {
    pub ego: Vec<f32>,
    /// Slot-major, `max_vehicles * vehicle_width`.
    pub vehicles: Vec<f32>,
    pub mask: Vec<bool>,
}

impl EncodedState {
    pub fn from_encoded(e: &Encoded) -> Self {
        EncodedState {
            ego: e.ego.iter().map(|v| *v as f32).collect(),
            vehicles: e.vehicles.iter().flatten().map(|v| *v as f32).collect(),
            mask: e.mask.clone(),
        }
    }

    /// A state with only ego features and no vehicles.
    pub fn ego_only(ego: &[f64], spec: &NetworkSpec) -> Self {
        EncodedState {
            ego: ego.iter().map(|v| *v as f32).collect(),
            vehicles: vec![0.0; spec.max_vehicles * spec.vehicle_width],
            mask: vec![false; spec.max_vehicles],
        }
    }

    fn check(&self, spec: &NetworkSpec) -> Result<(), LearnerError> {
        if self.ego.len() != spec.ego_width
            || self.mask.len() != spec.max_vehicles
            || self.vehicles.len() != spec.max_vehicles * spec.vehicle_width
        {
            return Err(LearnerError::Transition(format!(
                "state widths ego {} vehicles {} mask {} do not fit the network",
                self.ego.len(),
                self.vehicles.len(),
                self.mask.len()
            )));
        }
        Ok(())
    }

    fn write_row(&self, input: &mut NetInput, b: usize) {
        let vw = input.vehicles.dim().2;
        for (x, v) in input.ego.row_mut(b).iter_mut().zip(&self.ego) {
            *x = *v as f64;
        }
        for (j, present) in self.mask.iter().enumerate() {
            if *present {
                input.mask[[b, j]] = 1.0;
                for c in 0..vw {
                    input.vehicles[[b, j, c]] = self.vehicles[j * vw + c] as f64;
                }
            }
        }
    }
}

fn batch_input<'a>(spec: &NetworkSpec, states: impl ExactSizeIterator<Item = &'a EncodedState>) -> NetInput {
    let mut input = NetInput::zeros(states.len(), spec);
    for (b, s) in states.enumerate() {
        s.write_row(&mut input, b);
    }
    input
}

/// One stored step. Vectors indexed by objective hold that objective's view.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub states: Vec<EncodedState>,
    pub action: usize,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    pub next_states: Vec<EncodedState>,
    /// Actions allowed at `s'` by the levels above the learned objectives.
    pub next_prior: ActionSet,
    /// Per-slot auxiliary steps, empty for objectives without factored heads.
    pub factored: Vec<Vec<FactoredStep>>,
}

/// A learned objective: online and target parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct QObjective {
    pub name: String,
    pub net: Network,
    pub online: Parameters,
    pub target: Parameters,
    pub adam: AdamState,
    pub gamma: f64,
    pub slack: f64,
}

impl QObjective {
    pub fn new(name: impl Into<String>, spec: NetworkSpec, gamma: f64, slack: f64, rng: &mut ChaCha8Rng) -> Result<Self, LearnerError> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(LearnerError::Config(format!("discount {gamma} not in [0, 1)")));
        }
        if !(slack <= 0.0) {
            return Err(LearnerError::Config(format!("slack {slack} must be <= 0")));
        }
        let net = Network::new(spec)?;
        let online = net.init(rng);
        let target = online.clone();
        let adam = AdamState::new(net.n_params());
        Ok(QObjective { name: name.into(), net, online, target, adam, gamma, slack })
    }

    pub fn q_values(&self, state: &EncodedState) -> Result<Vec<f64>, LearnerError> {
        state.check(self.net.spec())?;
        let input = batch_input(self.net.spec(), std::iter::once(state));
        Ok(self.net.forward(&self.online, &input)?.q.row(0).to_vec())
    }

    pub fn sync_target(&mut self) {
        self.target.copy_from(&self.online);
    }

    pub fn is_factored(&self) -> bool {
        self.net.spec().head.is_factored()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub batch_size: usize,
    /// Transitions stored before the first update.
    pub warmup: usize,
    /// Updates between target-network syncs.
    pub target_sync: u64,
    /// Updates over which the importance exponent reaches `beta_end`.
    pub beta_anneal_steps: u64,
    pub adam: AdamConfig,
    pub replay: ReplayConfig,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            batch_size: 32,
            warmup: 1000,
            target_sync: 1000,
            beta_anneal_steps: 200_000,
            adam: AdamConfig::default(),
            replay: ReplayConfig::default(),
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.batch_size == 0 || self.target_sync == 0 || self.replay.capacity == 0 {
            return Err(LearnerError::Config("batch size, target sync and capacity must be >= 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(LearnerError::Config(format!("learning rate {} must be > 0", self.adam.lr)));
        }
        if !(self.replay.alpha >= 0.0 && self.replay.eps > 0.0) {
            return Err(LearnerError::Config("replay alpha must be >= 0 and eps > 0".into()));
        }
        Ok(())
    }
}

/// Bootstrapped targets of one objective for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveTargets {
    pub main: Vec<f64>,
    /// `[b][slot]`, `None` for slots absent in `s`.
    pub factored: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub step: u64,
    /// Importance-weighted loss per objective.
    pub losses: Vec<f64>,
    pub mean_abs_td: Vec<f64>,
    /// Objectives whose update was skipped on a non-finite value.
    pub skipped: Vec<bool>,
    pub synced: bool,
}

pub struct Learner {
    pub objectives: Vec<QObjective>,
    pub replay: PrioritizedReplay<Transition>,
    pub cfg: LearnerConfig,
    steps: u64,
    rng: ChaCha8Rng,
}

impl Learner {
    pub fn new(objectives: Vec<QObjective>, cfg: LearnerConfig) -> Result<Self, LearnerError> {
        cfg.validate()?;
        if objectives.is_empty() {
            return Err(LearnerError::Config("at least one objective is required".into()));
        }
        let na = objectives[0].net.spec().n_actions;
        if objectives.iter().any(|o| o.net.spec().n_actions != na) {
            return Err(LearnerError::Config("objectives disagree on the number of actions".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Learner { objectives, replay: PrioritizedReplay::new(cfg.replay.clone()), cfg, steps: 0, rng })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_steps(&mut self, steps: u64) {
        self.steps = steps;
    }

    pub fn n_actions(&self) -> usize {
        self.objectives[0].net.spec().n_actions
    }

    pub fn push(&mut self, t: Transition) -> Result<usize, LearnerError> {
        self.check_transition(&t)?;
        Ok(self.replay.push(t))
    }

    pub fn ready(&self) -> bool {
        self.replay.len() >= self.cfg.warmup.max(1)
    }

    fn check_transition(&self, t: &Transition) -> Result<(), LearnerError> {
        let k = self.objectives.len();
        if t.states.len() != k || t.next_states.len() != k || t.rewards.len() != k || t.terminals.len() != k || t.factored.len() != k {
            return Err(LearnerError::Transition(format!("expected {k} entries per objective")));
        }
        if t.action >= self.n_actions() || t.next_prior.is_empty() {
            return Err(LearnerError::Transition(format!("action {} or empty next prior", t.action)));
        }
        for (i, o) in self.objectives.iter().enumerate() {
            t.states[i].check(o.net.spec())?;
            t.next_states[i].check(o.net.spec())?;
            if !t.rewards[i].is_finite() {
                return Err(LearnerError::Transition(format!("non-finite reward for {}", o.name)));
            }
            let m = o.net.spec().max_vehicles;
            if o.is_factored() && t.factored[i].len() != m {
                return Err(LearnerError::Transition(format!("{} needs {m} factored steps", o.name)));
            }
        }
        Ok(())
    }

    /// Targets for `batch`, computed with the current online and target
    /// parameters.
    pub fn targets(&self, batch: &[&Transition]) -> Result<Vec<ObjectiveTargets>, LearnerError> {
        let nexts: Vec<(Forward, Forward)> = self
            .objectives
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let input = batch_input(o.net.spec(), batch.iter().map(|t| &t.next_states[i]));
                Ok((o.net.forward(&o.online, &input)?, o.net.forward(&o.target, &input)?))
            })
            .collect::<Result<_, NeuralError>>()?;
        let mut out: Vec<ObjectiveTargets> = self
            .objectives
            .iter()
            .map(|_| ObjectiveTargets { main: Vec::with_capacity(batch.len()), factored: Vec::with_capacity(batch.len()) })
            .collect();
        for (b, t) in batch.iter().enumerate() {
            let mut prior = t.next_prior;
            for (i, o) in self.objectives.iter().enumerate() {
                let (online, target) = &nexts[i];
                let q_on = online.q.row(b);
                let q_on = q_on.as_slice().expect("row-major");
                let best = restricted_argmax(q_on, prior).ok_or(PolicyError::EmptyPrior)?;
                let cont = if t.terminals[i] { 0.0 } else { o.gamma };
                out[i].main.push(t.rewards[i] + cont * target.q[[b, best]]);

                let mut fac = Vec::new();
                if o.is_factored() {
                    let m = o.net.spec().max_vehicles;
                    for (j, fs) in t.factored[i].iter().enumerate() {
                        if !t.states[i].mask[j] {
                            fac.push(None);
                            continue;
                        }
                        let boot = match fs.next_slot {
                            Some(nj) if !(fs.terminal || t.terminals[i]) && t.next_states[i].mask[nj] => {
                                let row = online.factored_row(b, nj, m).expect("factored head");
                                let a = restricted_argmax(row.as_slice().expect("row-major"), prior).ok_or(PolicyError::EmptyPrior)?;
                                o.gamma * target.factored_row(b, nj, m).expect("factored head")[a]
                            }
                            _ => 0.0,
                        };
                        fac.push(Some(fs.reward + boot));
                    }
                }
                out[i].factored.push(fac);
                prior = admissible_set(q_on, prior, o.slack)?;
            }
        }
        Ok(out)
    }

    /// Samples a batch and applies one update, or returns `None` during
    /// warmup.
    pub fn train_step(&mut self) -> Result<Option<TrainReport>, LearnerError> {
        if !self.ready() {
            return Ok(None);
        }
        let frac = self.steps as f64 / self.cfg.beta_anneal_steps.max(1) as f64;
        let beta = self.cfg.replay.beta(frac);
        let batch = self.replay.sample(self.cfg.batch_size, beta, &mut self.rng);
        self.train_batch(&batch).map(Some)
    }

    /// One update on the given replay slots with the given importance
    /// weights. Loss per objective is `sum_b w_b (delta_b^2 + sum_j
    /// delta_bj^2) / (2 B)`, with factored terms only for factored heads.
    pub fn train_batch(&mut self, batch: &SampledBatch) -> Result<TrainReport, LearnerError> {
        let items: Vec<&Transition> = batch.indices.iter().map(|&i| self.replay.get(i)).collect();
        let targets = self.targets(&items)?;
        let nb = items.len() as f64;
        let k = self.objectives.len();
        let mut losses = vec![0.0; k];
        let mut mean_abs_td = vec![0.0; k];
        let mut skipped = vec![false; k];
        let mut priority = vec![0.0f64; items.len()];
        let mut grads = Vec::with_capacity(k);

        for (i, o) in self.objectives.iter().enumerate() {
            let spec = o.net.spec();
            let (na, m) = (spec.n_actions, spec.max_vehicles);
            let input = batch_input(spec, items.iter().map(|t| &t.states[i]));
            let fwd = o.net.forward(&o.online, &input)?;
            let mut dq = Array2::<f64>::zeros((items.len(), na));
            let mut dqf = o.is_factored().then(|| Array2::<f64>::zeros((items.len() * m, na)));
            for (b, t) in items.iter().enumerate() {
                let w = batch.weights[b];
                let delta = fwd.q[[b, t.action]] - targets[i].main[b];
                dq[[b, t.action]] = w * delta / nb;
                losses[i] += w * delta * delta / (2.0 * nb);
                mean_abs_td[i] += delta.abs() / nb;
                priority[b] = priority[b].max(delta.abs());
                if let Some(dqf) = dqf.as_mut() {
                    for (j, y) in targets[i].factored[b].iter().enumerate() {
                        if let Some(y) = y {
                            let d = fwd.factored_row(b, j, m).expect("factored head")[t.action] - y;
                            dqf[[b * m + j, t.action]] = w * d / nb;
                            losses[i] += w * d * d / (2.0 * nb);
                        }
                    }
                }
            }
            match o.net.backward(&o.online, &fwd, &dq, dqf.as_ref()) {
                Ok(g) => grads.push(Some(g)),
                Err(e @ NeuralError::NonFiniteLoss { .. }) => {
                    log::warn!("{}: {e}, update skipped", o.name);
                    skipped[i] = true;
                    grads.push(None);
                }
                Err(e) => return Err(e.into()),
            }
        }

        for ((o, g), skip) in self.objectives.iter_mut().zip(grads).zip(skipped.iter_mut()) {
            let Some(g) = g else { continue };
            match apply_update(&mut o.online, &g, &mut o.adam, &self.cfg.adam) {
                Ok(_) => {}
                Err(NeuralError::NonFiniteGradient) => *skip = true,
                Err(e) => return Err(e.into()),
            }
        }
        for (b, &slot) in batch.indices.iter().enumerate() {
            if priority[b].is_finite() {
                self.replay.update(slot, priority[b]);
            }
        }
        self.steps += 1;
        let synced = self.steps % self.cfg.target_sync == 0;
        if synced {
            self.objectives.iter_mut().for_each(QObjective::sync_target);
        }
        Ok(TrainReport { step: self.steps, losses, mean_abs_td, skipped, synced })
    }

    /// Online Q values of every objective at one state.
    pub fn q_values(&self, states: &[EncodedState]) -> Result<Vec<Vec<f64>>, LearnerError> {
        self.objectives.iter().zip(states).map(|(o, s)| o.q_values(s)).collect()
    }
}
