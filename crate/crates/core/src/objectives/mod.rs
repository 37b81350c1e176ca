//! The four driving objectives: lane-change legality, safety, traffic
//! regulation, and comfort & speed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{EgoObservation, Observation};
use crate::sim::{Action, StepEvents, TerminalCause, N_ACTIONS};
use crate::tlq::{ActionSet, ObjectiveStack, QAgent, RuleAgent};


#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid objective config: {0}")]
    Config(String),
}

/// Level of each objective in the stack (1-based).
pub const LANE_CHANGE_LEVEL: usize = 1;
pub const SAFETY_LEVEL: usize = 2;
pub const REGULATION_LEVEL: usize = 3;
pub const COMFORT_LEVEL: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub safety_gamma: f64,
    pub regulation_gamma: f64,
    pub safety_slack: f64,
    pub regulation_slack: f64,
    /// Closing vehicles under this time to collision are penalized (s).
    pub ttc_threshold: f64,
    pub yield_penalty: f64,
    /// Per step stopped while holding right of way.
    pub proceed_penalty: f64,
    /// Distance over which the wrong-lane penalty ramps up (m).
    pub wrong_lane_distance: f64,
    /// Smallest proximity factor of the wrong-lane penalty.
    pub wrong_lane_floor: f64,
    pub scalar: ScalarWeights,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            safety_gamma: 0.99,
            regulation_gamma: 0.95,
            safety_slack: -0.2,
            regulation_slack: -0.2,
            ttc_threshold: 3.0,
            yield_penalty: -1.0,
            proceed_penalty: -0.02,
            wrong_lane_distance: 100.0,
            wrong_lane_floor: 0.1,
            scalar: ScalarWeights::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for (name, g) in [("safety_gamma", self.safety_gamma), ("regulation_gamma", self.regulation_gamma)] {
            if !(0.0..1.0).contains(&g) {
                return Err(ObjectiveError::Config(format!("{name} {g} not in [0, 1)")));
            }
        }
        for (name, t) in [("safety_slack", self.safety_slack), ("regulation_slack", self.regulation_slack)] {
            if !(t <= 0.0 && t.is_finite()) {
                return Err(ObjectiveError::Config(format!("{name} {t} must be <= 0")));
            }
        }
        if !(self.ttc_threshold > 0.0) || !(self.wrong_lane_distance > 0.0) || !(0.0..=1.0).contains(&self.wrong_lane_floor) {
            return Err(ObjectiveError::Config("ttc threshold, wrong-lane distance or floor out of range".into()));
        }
        if self.yield_penalty > 0.0 || self.proceed_penalty > 0.0 {
            return Err(ObjectiveError::Config("penalties must be <= 0".into()));
        }
        Ok(())
    }
}

/// Weights of the single reward used by the scalar baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalarWeights {
    pub lane_change: f64,
    pub safety: f64,
    pub regulation: f64,
    pub comfort: f64,
}

impl Default for ScalarWeights {
    fn default() -> Self {
        ScalarWeights { lane_change: 1.0, safety: 1.0, regulation: 0.5, comfort: 0.02 }
    }
}

/// Removes lane changes that are impossible from the ego's position.
pub fn lane_change_admissible(ego: &EgoObservation, prior: ActionSet) -> ActionSet {
    let mut set = prior;
    if ego.in_intersection || !ego.left_lane {
        set.remove(Action::ChangeLeft.index());
    }
    if ego.in_intersection || !ego.right_lane {
        set.remove(Action::ChangeRight.index());
    }
    // A prior of only impossible lane changes is left alone; the world
    // treats them as no-ops.
    if set.is_empty() {
        prior
    } else {
        set
    }
}

/// Per-slot outcome of the auxiliary single-vehicle tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredStep {
    pub reward: f64,
    /// The instance ends: the vehicle left the scene or hit the ego.
    pub terminal: bool,
    /// Slot of the same vehicle in the next observation.
    pub next_slot: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyOutcome {
    pub reward: f64,
    pub terminal: bool,
    /// One entry per slot of the previous observation.
    pub factored: Vec<FactoredStep>,
}

/// Safety reward for the transition `prev -> next`: -1 on collision, or
/// when a vehicle's time to collision is under the threshold and still
/// decreasing. Vehicles without a previous estimate score 0.
pub fn safety_reward(prev: &Observation, next: &Observation, events: &StepEvents, cfg: &ObjectiveConfig) -> SafetyOutcome {
    let collided = events.collision;
    let factored: Vec<FactoredStep> = prev
        .slots
        .iter()
        .map(|slot| {
            let Some(o) = slot else {
                return FactoredStep { reward: 0.0, terminal: true, next_slot: None };
            };
            let hit = collided && events.partner == Some(o.id);
            let next_slot = next.slot_of(o.id);
            let closing = next_slot.and_then(|j| next.slots[j].as_ref()).is_some_and(|n| n.ttc < cfg.ttc_threshold && n.ttc < o.ttc);
            FactoredStep {
                reward: if hit || closing { -1.0 } else { 0.0 },
                terminal: hit || next_slot.is_none(),
                next_slot: if hit { None } else { next_slot },
            }
        })
        .collect();
    let any = factored.iter().any(|f| f.reward < 0.0);
    SafetyOutcome {
        reward: if collided || any { -1.0 } else { 0.0 },
        terminal: collided || events.route_complete,
        factored,
    }
}

/// Wrong-lane penalty magnitude in [0, 1].
pub fn wrong_lane_penalty(ego: &EgoObservation, cfg: &ObjectiveConfig) -> f64 {
    if ego.lane_gap == 0 {
        return 0.0;
    }
    let proximity = (1.0 - ego.d / cfg.wrong_lane_distance).clamp(cfg.wrong_lane_floor, 1.0);
    (ego.lane_gap.unsigned_abs() as f64 * proximity).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegulationOutcome {
    pub reward: f64,
    pub terminal: bool,
}

/// Regulation reward for arriving at `next` with `events`.
pub fn regulation_reward(next: &EgoObservation, events: &StepEvents, cfg: &ObjectiveConfig) -> RegulationOutcome {
    let mut r = 0.0;
    if events.yield_violation {
        r += cfg.yield_penalty;
    }
    if events.failed_to_proceed {
        r += cfg.proceed_penalty;
    }
    // Entering the junction from a wrong lane is the stop-line case, even
    // when a last-moment lane change leaves `next` with no lane gap.
    r -= if events.wrong_turn { 1.0 } else { wrong_lane_penalty(next, cfg) };
    RegulationOutcome {
        reward: r.clamp(-1.0, 0.0),
        terminal: events.row_changed
            || events.road_changed
            || matches!(events.terminal, Some(TerminalCause::Collision | TerminalCause::RouteComplete)),
    }
}

/// Preference order below the speed limit.
pub const BELOW_LIMIT_RANKING: [Action; N_ACTIONS] = [
    Action::MedAccel,
    Action::MinAccel,
    Action::Maintain,
    Action::MinDecel,
    Action::MedDecel,
    Action::MaxAccel,
    Action::MaxDecel,
    Action::ChangeRight,
    Action::ChangeLeft,
];

/// Preference order at or above the speed limit.
pub const AT_LIMIT_RANKING: [Action; N_ACTIONS] = [
    Action::Maintain,
    Action::MinDecel,
    Action::MinAccel,
    Action::MedDecel,
    Action::MedAccel,
    Action::MaxDecel,
    Action::MaxAccel,
    Action::ChangeRight,
    Action::ChangeLeft,
];

/// Highest-ranked admissible action.
pub fn comfort_speed_select(admissible: ActionSet, ego: &EgoObservation) -> Option<Action> {
    let ranking = if ego.v < ego.speed_limit - 1e-9 { &BELOW_LIMIT_RANKING } else { &AT_LIMIT_RANKING };
    ranking.iter().copied().find(|a| admissible.contains(a.index()))
}

/// Reward of the comfort & speed preferences, used only by the scalar
/// baseline: speed relative to the limit, minus a cost for extreme or
/// lane-change actions.
pub fn comfort_reward(ego: &EgoObservation, action: Action) -> f64 {
    let progress = if ego.speed_limit > 0.0 { (ego.v / ego.speed_limit).min(1.0) } else { 0.0 };
    let harsh = matches!(action, Action::MaxAccel | Action::MaxDecel) || action.is_lane_change();
    progress - if harsh { 0.5 } else { 0.0 }
}

/// All objective rewards of one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRewards {
    pub safety: SafetyOutcome,
    pub regulation: RegulationOutcome,
    pub lane_change: f64,
    pub comfort: f64,
}

impl StepRewards {
    pub fn compute(prev: &Observation, action: Action, next: &Observation, events: &StepEvents, cfg: &ObjectiveConfig) -> Self {
        StepRewards {
            safety: safety_reward(prev, next, events, cfg),
            regulation: regulation_reward(&next.ego, events, cfg),
            lane_change: if events.illegal_action { -1.0 } else { 0.0 },
            comfort: comfort_reward(&next.ego, action),
        }
    }

    /// Weighted sum for the scalar baseline.
    pub fn scalar(&self, w: &ScalarWeights) -> f64 {
        w.lane_change * self.lane_change + w.safety * self.safety.reward + w.regulation * self.regulation.reward + w.comfort * self.comfort
    }
}

/// Decision context of the driving stack: the ego observation plus the
/// current safety and regulation action values.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveState {
    pub ego: EgoObservation,
    pub safety_q: Vec<f64>,
    pub regulation_q: Vec<f64>,
}

/// Lane change, safety, regulation, comfort & speed, in that order.
pub fn driving_stack(safety_slack: f64, regulation_slack: f64) -> ObjectiveStack<DriveState> {
    ObjectiveStack::new(N_ACTIONS)
        .with(RuleAgent::new("lane_change", |s: &DriveState, prior| lane_change_admissible(&s.ego, prior)))
        .with(QAgent::new("safety", safety_slack, |s: &DriveState| s.safety_q.clone()))
        .with(QAgent::new("regulation", regulation_slack, |s: &DriveState| s.regulation_q.clone()))
        .with(RuleAgent::new("comfort_speed", |s: &DriveState, prior: ActionSet| {
            comfort_speed_select(prior, &s.ego).map_or(prior, |a| ActionSet::singleton(a.index()))
        }))
}
