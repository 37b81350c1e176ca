use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HarnessError, NetSizes, RunConfig};
use crate::features::{encode, FeatureConfig, Observation, View};
use crate::learner::{Bundle, EncodedState, QObjective};
use crate::neural::NetworkSpec;
use crate::objectives::{driving_stack, DriveState};
use crate::sim::N_ACTIONS;
use crate::tlq::{restricted_argmax, ActionSet, ObjectiveStack, SelectionMode};

/// How actions are chosen from the learned objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Lane-change rule, safety Q, regulation Q, comfort rule.
    Lexicographic,
    /// One Q function on the weighted reward, argmax over all actions.
    Scalar,
}

impl PolicyKind {
    /// Network view of each learned objective, in objective order.
    pub fn views(self) -> &'static [View] {
        match self {
            PolicyKind::Lexicographic => &[View::Safety, View::Regulation],
            PolicyKind::Scalar => &[View::Full],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Lexicographic => "lexicographic",
            PolicyKind::Scalar => "scalar",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "lexicographic" => Some(PolicyKind::Lexicographic),
            "scalar" => Some(PolicyKind::Scalar),
            _ => None,
        }
    }
}

fn spec_for(view: View, sizes: &NetSizes, features: &FeatureConfig) -> NetworkSpec {
    NetworkSpec {
        ego_width: view.ego_width(),
        vehicle_width: view.vehicle_width(),
        max_vehicles: features.slots,
        shared: sizes.shared.clone(),
        merged: sizes.merged.clone(),
        head: sizes.head,
        n_actions: N_ACTIONS,
    }
}

/// Fresh networks for `kind` as described by `cfg`.
pub fn build_objectives(cfg: &RunConfig, kind: PolicyKind, rng: &mut ChaCha8Rng) -> Result<Vec<QObjective>, HarnessError> {
    let (n, o, f) = (&cfg.networks, &cfg.objectives, &cfg.features);
    let objectives = match kind {
        PolicyKind::Lexicographic => vec![
            QObjective::new("safety", spec_for(View::Safety, &n.safety, f), o.safety_gamma, o.safety_slack, rng)?,
            QObjective::new("regulation", spec_for(View::Regulation, &n.regulation, f), o.regulation_gamma, o.regulation_slack, rng)?,
        ],
        PolicyKind::Scalar => vec![QObjective::new("scalar", spec_for(View::Full, &n.scalar, f), o.safety_gamma, 0.0, rng)?],
    };
    Ok(objectives)
}

/// Recovers the policy kind stored with a checkpoint and checks that its
/// networks accept the inputs `features` produces.
pub fn objectives_from_bundle(bundle: Bundle, features: &FeatureConfig) -> Result<(PolicyKind, Vec<QObjective>), HarnessError> {
    let kind = bundle
        .meta
        .get("policy")
        .and_then(|v| v.as_str())
        .and_then(PolicyKind::parse)
        .ok_or_else(|| HarnessError::Incompatible("checkpoint does not name its policy kind".into()))?;
    let views = kind.views();
    if bundle.objectives.len() != views.len() {
        return Err(HarnessError::Incompatible(format!("{} objectives for a {} policy", bundle.objectives.len(), kind.name())));
    }
    for (o, view) in bundle.objectives.iter().zip(views) {
        let s = o.net.spec();
        if s.ego_width != view.ego_width() || s.vehicle_width != view.vehicle_width() || s.max_vehicles != features.slots || s.n_actions != N_ACTIONS {
            return Err(HarnessError::Incompatible(format!(
                "{}: network expects {}+{}x{} inputs, features give {}+{}x{}",
                o.name,
                s.ego_width,
                s.max_vehicles,
                s.vehicle_width,
                view.ego_width(),
                features.slots,
                view.vehicle_width()
            )));
        }
    }
    Ok((kind, bundle.objectives))
}

pub struct Policy {
    pub kind: PolicyKind,
    stack: ObjectiveStack<DriveState>,
}

impl Policy {
    pub fn new(kind: PolicyKind, objectives: &[QObjective]) -> Self {
        let (ts, tr) = match kind {
            PolicyKind::Lexicographic => (objectives[0].slack, objectives[1].slack),
            PolicyKind::Scalar => (0.0, 0.0),
        };
        Policy { kind, stack: driving_stack(ts, tr) }
    }

    /// Network inputs of `obs` for every learned objective.
    pub fn encode(&self, obs: &Observation, features: &FeatureConfig) -> Vec<EncodedState> {
        self.kind.views().iter().map(|v| EncodedState::from_encoded(&encode(obs, *v, features))).collect()
    }

    /// Picks an action. `explore` names the exploring level (1-based) for
    /// the lexicographic stack; the scalar policy explores uniformly.
    pub fn act(
        &self,
        objectives: &[QObjective],
        obs: &Observation,
        states: &[EncodedState],
        explore: Option<usize>,
        mode: SelectionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize, HarnessError> {
        match self.kind {
            PolicyKind::Lexicographic => {
                let state = DriveState {
                    ego: obs.ego.clone(),
                    safety_q: objectives[0].q_values(&states[0])?,
                    regulation_q: objectives[1].q_values(&states[1])?,
                };
                Ok(self.stack.select_action(&state, explore, mode, rng)?)
            }
            PolicyKind::Scalar => {
                if explore.is_some() {
                    return Ok(rng.random_range(0..N_ACTIONS));
                }
                let q = objectives[0].q_values(&states[0])?;
                Ok(restricted_argmax(&q, ActionSet::full(N_ACTIONS)).expect("non-empty action space"))
            }
        }
    }
}
