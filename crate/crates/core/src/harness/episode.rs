use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::policy::{Policy, PolicyKind};
use super::HarnessError;
use crate::features::{featurize, FeatureConfig, Observation};
use crate::learner::{EncodedState, QObjective, Transition};
use crate::objectives::{lane_change_admissible, ObjectiveConfig, StepRewards};
use crate::sim::{Action, MapConfig, MapKind, SimConfig, World, N_ACTIONS};
use crate::tlq::{ActionSet, SelectionMode};

/// What happened in one episode.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub steps: u64,
    pub collision: bool,
    pub yield_violation: bool,
    pub timeout: bool,
    pub wrong_turn: bool,
    pub route_complete: bool,
    pub featurization_failure: bool,
    pub illegal_actions: u64,
}

impl EpisodeSummary {
    /// Timeouts count as yielding violations unless the episode ended in a
    /// collision.
    pub fn yielding(&self) -> bool {
        self.yield_violation || (self.timeout && !self.collision)
    }

    pub fn violated(&self, count_turning: bool) -> bool {
        self.collision || self.yielding() || (count_turning && self.wrong_turn)
    }
}

/// Per-category violation counts over a set of evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViolationReport {
    pub map: String,
    pub episodes: usize,
    pub collisions: usize,
    /// Failures to yield plus timeouts.
    pub yielding: usize,
    pub timeouts: usize,
    /// `None` when the map has no turn-lane rule to check.
    pub turning: Option<usize>,
    /// Episodes with at least one counted violation.
    pub combined: usize,
    pub completed: usize,
    pub featurization_failures: usize,
    pub mean_steps: f64,
}

impl ViolationReport {
    pub fn from_episodes(map: &str, episodes: &[EpisodeSummary], count_turning: bool) -> Self {
        let count = |f: &dyn Fn(&EpisodeSummary) -> bool| episodes.iter().filter(|e| f(e)).count();
        let steps: u64 = episodes.iter().map(|e| e.steps).sum();
        ViolationReport {
            map: map.to_string(),
            episodes: episodes.len(),
            collisions: count(&|e| e.collision),
            yielding: count(&|e| e.yielding()),
            timeouts: count(&|e| e.timeout && !e.collision),
            turning: count_turning.then(|| count(&|e| e.wrong_turn)),
            combined: count(&|e| e.violated(count_turning)),
            completed: count(&|e| e.route_complete),
            featurization_failures: count(&|e| e.featurization_failure),
            mean_steps: if episodes.is_empty() { 0.0 } else { steps as f64 / episodes.len() as f64 },
        }
    }

    fn rate(&self, n: usize) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            n as f64 / self.episodes as f64
        }
    }

    pub fn collision_rate(&self) -> f64 {
        self.rate(self.collisions)
    }

    pub fn yielding_rate(&self) -> f64 {
        self.rate(self.yielding)
    }

    pub fn turning_rate(&self) -> Option<f64> {
        self.turning.map(|t| self.rate(t))
    }

    pub fn combined_rate(&self) -> f64 {
        self.rate(self.combined)
    }

    pub const CSV_HEADER: [&'static str; 8] =
        ["map", "episodes", "collision", "yielding", "turning", "combined", "completed", "featurization_failures"];

    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.map.clone(),
            self.episodes.to_string(),
            format!("{:.4}", self.collision_rate()),
            format!("{:.4}", self.yielding_rate()),
            self.turning_rate().map_or("N/A".to_string(), |r| format!("{r:.4}")),
            format!("{:.4}", self.combined_rate()),
            format!("{:.4}", self.rate(self.completed)),
            self.featurization_failures.to_string(),
        ]
    }

    /// One line in Collision / Yielding / Turning order.
    pub fn table_row(&self) -> String {
        let pct = |r: f64| format!("{:5.1}%", 100.0 * r);
        format!(
            "{:<6} collision {}  yielding {}  turning {}  (n={}, combined {})",
            self.map,
            pct(self.collision_rate()),
            pct(self.yielding_rate()),
            self.turning_rate().map_or("  N/A ".to_string(), pct),
            self.episodes,
            pct(self.combined_rate())
        )
    }
}

pub(crate) fn map_name(kind: MapKind) -> &'static str {
    match kind {
        MapKind::Cross => "cross",
        MapKind::Ring => "ring",
    }
}

/// Result of one actor step.
pub struct ActorStep {
    pub transition: Option<Transition>,
    pub finished: Option<EpisodeSummary>,
}

/// One world plus the episode currently running in it.
pub struct Actor {
    world: World,
    seeds: ChaCha8Rng,
    obs: Option<Observation>,
    states: Vec<EncodedState>,
    current: EpisodeSummary,
}

fn finite(states: &[EncodedState]) -> bool {
    states.iter().all(|s| s.ego.iter().chain(&s.vehicles).all(|v| v.is_finite()))
}

impl Actor {
    /// Episode seeds are drawn from a stream seeded with `seed`.
    pub fn new(sim: SimConfig, seed: u64) -> Result<Self, HarnessError> {
        Ok(Actor {
            world: World::from_config(sim, seed)?,
            seeds: ChaCha8Rng::seed_from_u64(seed),
            obs: None,
            states: Vec::new(),
            current: EpisodeSummary::default(),
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    /// Starts the episode with `seed`. Returns `false` if its first
    /// observation cannot be featurized.
    pub fn begin(&mut self, seed: u64, policy: &Policy, features: &FeatureConfig) -> Result<bool, HarnessError> {
        self.world.begin_episode(seed)?;
        self.current = EpisodeSummary { seed, ..EpisodeSummary::default() };
        self.obs = featurize(&self.world, features);
        match &self.obs {
            Some(obs) => {
                self.states = policy.encode(obs, features);
                Ok(finite(&self.states))
            }
            None => Ok(false),
        }
    }

    /// Starts the next episode from the actor's own seed stream, skipping
    /// seeds whose first observation fails.
    fn begin_next(&mut self, policy: &Policy, features: &FeatureConfig) -> Result<(), HarnessError> {
        for _ in 0..100 {
            let seed = self.seeds.random();
            if self.begin(seed, policy, features)? {
                return Ok(());
            }
            log::warn!("featurization failed at the start of episode seed {seed}");
        }
        Err(HarnessError::Config("no episode could be featurized".into()))
    }

    pub fn in_episode(&self) -> bool {
        self.obs.is_some()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        policy: &Policy,
        objectives: &[QObjective],
        features: &FeatureConfig,
        ocfg: &ObjectiveConfig,
        explore: Option<usize>,
        mode: SelectionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ActorStep, HarnessError> {
        if self.obs.is_none() {
            self.begin_next(policy, features)?;
        }
        let obs = self.obs.take().expect("episode running");
        let states = std::mem::take(&mut self.states);
        let action = policy.act(objectives, &obs, &states, explore, mode, rng)?;
        let events = self.world.step(action)?;

        let c = &mut self.current;
        c.steps += 1;
        c.collision |= events.collision;
        c.yield_violation |= events.yield_violation;
        c.wrong_turn |= events.wrong_turn;
        c.timeout |= events.timeout;
        c.route_complete |= events.route_complete;
        c.illegal_actions += u64::from(events.illegal_action);
        let ended = events.terminal.is_some();

        let next = featurize(&self.world, features);
        let next_states = next.as_ref().map(|o| policy.encode(o, features));
        let (next_obs, next_states) = match (next, next_states) {
            (Some(o), Some(s)) if finite(&s) => (o, s),
            _ if ended => (obs.clone(), states.clone()),
            _ => {
                c.featurization_failure = true;
                log::warn!("featurization failed mid-episode (seed {}, step {})", c.seed, c.steps);
                return Ok(ActorStep { transition: None, finished: Some(std::mem::take(c)) });
            }
        };

        let rewards = StepRewards::compute(&obs, Action::ALL[action], &next_obs, &events, ocfg);
        let safety_factored = objectives.first().is_some_and(|o| o.is_factored());
        let transition = match policy.kind {
            PolicyKind::Lexicographic => Transition {
                states,
                action,
                rewards: vec![rewards.safety.reward, rewards.regulation.reward],
                terminals: vec![rewards.safety.terminal, rewards.regulation.terminal],
                next_prior: lane_change_admissible(&next_obs.ego, ActionSet::full(N_ACTIONS)),
                next_states: next_states.clone(),
                factored: vec![if safety_factored { rewards.safety.factored.clone() } else { Vec::new() }, Vec::new()],
            },
            PolicyKind::Scalar => Transition {
                states,
                action,
                rewards: vec![rewards.scalar(&ocfg.scalar)],
                terminals: vec![events.collision || events.route_complete],
                next_prior: ActionSet::full(N_ACTIONS),
                next_states: next_states.clone(),
                factored: vec![Vec::new()],
            },
        };
        let finished = if ended {
            Some(std::mem::take(&mut self.current))
        } else {
            self.obs = Some(next_obs);
            self.states = next_states;
            None
        };
        Ok(ActorStep { transition: Some(transition), finished })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub episodes: usize,
    /// Episode `i` uses seed `seed_base + i`.
    pub seed_base: u64,
    pub mode: SelectionMode,
    /// Count wrong-lane turns; off for maps without turn lanes.
    pub count_turning: bool,
}

impl EvalOptions {
    /// Counts turning only on maps with dedicated turn lanes.
    pub fn for_map(map: &MapConfig, episodes: usize, seed_base: u64, mode: SelectionMode) -> Self {
        EvalOptions { episodes, seed_base, mode, count_turning: map.kind == MapKind::Cross }
    }
}

/// Greedy evaluation of the current online networks.
pub fn evaluate(
    policy: &Policy,
    objectives: &[QObjective],
    sim: &SimConfig,
    features: &FeatureConfig,
    ocfg: &ObjectiveConfig,
    opts: &EvalOptions,
) -> Result<(ViolationReport, Vec<EpisodeSummary>), HarnessError> {
    let mut actor = Actor::new(sim.clone(), opts.seed_base)?;
    let mut episodes = Vec::with_capacity(opts.episodes);
    for i in 0..opts.episodes {
        let seed = opts.seed_base.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if !actor.begin(seed, policy, features)? {
            episodes.push(EpisodeSummary { seed, featurization_failure: true, ..EpisodeSummary::default() });
            continue;
        }
        loop {
            let step = actor.step(policy, objectives, features, ocfg, None, opts.mode, &mut rng)?;
            if let Some(done) = step.finished {
                episodes.push(done);
                break;
            }
        }
    }
    let report = ViolationReport::from_episodes(map_name(sim.map.kind), &episodes, opts.count_turning);
    Ok((report, episodes))
}
