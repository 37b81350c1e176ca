//! Ego-centric observations built from the simulator state.

use serde::{Deserialize, Serialize};

use crate::sim::geometry::wrap_angle;
use crate::sim::{LaneGraph, LaneId, Turn, Vehicle, VehicleId, World};

#[cfg(test)]
mod tests;

/// How a surrounding vehicle relates to the ego's lane and route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Merge,
    Crossing,
    Left,
    Right,
    Ahead,
    Behind,
    Irrelevant,
}

impl Relation {
    pub const ALL: [Relation; 7] = [
        Relation::Merge,
        Relation::Crossing,
        Relation::Left,
        Relation::Right,
        Relation::Ahead,
        Relation::Behind,
        Relation::Irrelevant,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The relation seen from the other vehicle.
    pub fn mirror(self) -> Relation {
        match self {
            Relation::Left => Relation::Right,
            Relation::Right => Relation::Left,
            Relation::Ahead => Relation::Behind,
            Relation::Behind => Relation::Ahead,
            r => r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Number of vehicle slots.
    pub slots: usize,
    pub ttc_cap: f64,
    pub distance_scale: f64,
    pub speed_scale: f64,
    /// Route distance searched for ahead/behind and conflicts (m).
    pub range: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { slots: 8, ttc_cap: 10.0, distance_scale: 100.0, speed_scale: 20.0, range: 150.0 }
    }
}

impl FeatureConfig {
    /// Slot count of the large configuration.
    pub const WIDE_SLOTS: usize = 32;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgoObservation {
    pub v: f64,
    /// Distance to the next junction; 0 inside one, `distance_scale` when
    /// none is ahead.
    pub d: f64,
    pub in_intersection: bool,
    pub left_lane: bool,
    pub right_lane: bool,
    /// Lanes to move left (positive) or right (negative) to reach a lane
    /// allowing the assigned turn.
    pub lane_gap: i32,
    /// Limit of the current lane; used by rule objectives, not encoded.
    pub speed_limit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleObservation {
    pub id: VehicleId,
    /// Speed minus ego speed.
    pub v: f64,
    pub d: f64,
    pub in_intersection: bool,
    pub left_lane: bool,
    pub right_lane: bool,
    /// Position in the ego frame (x forward, y left).
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub has_priority: bool,
    /// Unnormalized time to collision, capped.
    pub ttc: f64,
    pub turn_signal: Turn,
    pub braking: bool,
    pub relation: Relation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub ego: EgoObservation,
    /// Nearest vehicles first; `None` pads empty slots.
    pub slots: Vec<Option<VehicleObservation>>,
}

impl Observation {
    pub fn mask(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }

    pub fn slot_of(&self, id: VehicleId) -> Option<usize> {
        self.slots.iter().position(|s| s.as_ref().is_some_and(|o| o.id == id))
    }

    pub fn ids(&self) -> Vec<Option<VehicleId>> {
        self.slots.iter().map(|s| s.as_ref().map(|o| o.id)).collect()
    }
}

/// Which state variables an objective sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Full,
    /// Everything except the lane gap and right-of-way flags.
    Safety,
    /// Right-of-way flags plus lane gap, junction flag, speed and distance.
    Regulation,
}

pub const EGO_FEATURES: usize = 6;
pub const VEHICLE_FEATURES: usize = 13 + Relation::ALL.len();

impl View {
    pub fn ego_width(self) -> usize {
        match self {
            View::Full => EGO_FEATURES,
            View::Safety => EGO_FEATURES - 1,
            View::Regulation => 4,
        }
    }

    pub fn vehicle_width(self) -> usize {
        match self {
            View::Full => VEHICLE_FEATURES,
            View::Safety => VEHICLE_FEATURES - 1,
            View::Regulation => 1,
        }
    }
}

/// Normalized network input for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub ego: Vec<f64>,
    pub vehicles: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub fn encode(obs: &Observation, view: View, cfg: &FeatureConfig) -> Encoded {
    let e = &obs.ego;
    let (ds, vs) = (cfg.distance_scale, cfg.speed_scale);
    let ego = match view {
        View::Full => vec![e.v / vs, e.d / ds, flag(e.in_intersection), flag(e.left_lane), flag(e.right_lane), e.lane_gap as f64],
        View::Safety => vec![e.v / vs, e.d / ds, flag(e.in_intersection), flag(e.left_lane), flag(e.right_lane)],
        View::Regulation => vec![e.lane_gap as f64, flag(e.in_intersection), e.v / vs, e.d / ds],
    };
    let width = view.vehicle_width();
    let vehicles = obs
        .slots
        .iter()
        .map(|slot| match slot {
            None => vec![0.0; width],
            Some(o) if view == View::Regulation => vec![flag(o.has_priority)],
            Some(o) => {
                let mut row = vec![
                    1.0,
                    o.v / vs,
                    o.d / ds,
                    flag(o.in_intersection),
                    flag(o.left_lane),
                    flag(o.right_lane),
                    o.x / ds,
                    o.y / ds,
                    o.heading / std::f64::consts::PI,
                ];
                if view == View::Full {
                    row.push(flag(o.has_priority));
                }
                row.extend([o.ttc / cfg.ttc_cap, o.turn_signal.signal(), flag(o.braking)]);
                let mut onehot = [0.0; 7];
                onehot[o.relation.index()] = 1.0;
                row.extend(onehot);
                row
            }
        })
        .collect();
    Encoded { ego, vehicles, mask: obs.mask() }
}

/// Route distance from point `a` to point `b` following lane successors,
/// if `b` is reachable within `limit`.
pub fn path_distance(graph: &LaneGraph, a: (LaneId, f64), b: (LaneId, f64), limit: f64) -> Option<f64> {
    if a.0 == b.0 && b.1 >= a.1 {
        return Some(b.1 - a.1);
    }
    let mut best: Option<f64> = None;
    let mut stack = vec![(a.0, graph.lane(a.0).length() - a.1)];
    while let Some((lane, dist)) = stack.pop() {
        for &next in &graph.lane(lane).successors {
            if next == b.0 {
                let d = dist + b.1;
                if d <= limit && best.is_none_or(|x| d < x) {
                    best = Some(d);
                }
            } else {
                let d = dist + graph.lane(next).length();
                if d < limit {
                    stack.push((next, d));
                }
            }
        }
    }
    best
}

/// Front-to-front route distance from `a` forward to `b`.
fn forward_gap(w: &World, a: &Vehicle, b: &Vehicle, range: f64) -> Option<f64> {
    path_distance(w.graph(), (a.lane(), a.s), (b.lane(), b.s), range)
}

/// Which of `a`/`b` leads along the lane graph, with the front-to-front
/// distance. Ties between equal positions go to the lower id.
fn longitudinal(w: &World, a: &Vehicle, b: &Vehicle, range: f64) -> Option<(bool, f64)> {
    match (forward_gap(w, a, b, range), forward_gap(w, b, a, range)) {
        (Some(ab), Some(ba)) if ab == ba => Some((b.id < a.id, ab)),
        (Some(ab), Some(ba)) => Some(if ab < ba { (true, ab) } else { (false, ba) }),
        (Some(ab), None) => Some((true, ab)),
        (None, Some(ba)) => Some((false, ba)),
        (None, None) => None,
    }
}

/// Shared conflicts ahead of both vehicles as `(ego entry, ego exit,
/// other entry, other exit)` distances, merges and crossings separately.
fn shared_conflicts(w: &World, e: &Vehicle, o: &Vehicle, range: f64) -> (Vec<[f64; 4]>, Vec<[f64; 4]>) {
    let ue = w.upcoming_conflicts(e, range);
    let uo = w.upcoming_conflicts(o, range);
    let (mut merges, mut crossings) = (Vec::new(), Vec::new());
    for a in &ue {
        for b in &uo {
            if a.conflict == b.conflict && a.other == b.lane && b.other == a.lane {
                let row = [a.dist_in, a.dist_out, b.dist_in, b.dist_out];
                match a.kind {
                    crate::sim::ConflictKind::Merge => merges.push(row),
                    crate::sim::ConflictKind::Crossing => crossings.push(row),
                }
            }
        }
    }
    (merges, crossings)
}

/// Topological relation of `other` with respect to `ego`.
pub fn classify_relation(w: &World, ego: &Vehicle, other: &Vehicle, cfg: &FeatureConfig) -> Relation {
    if let Some((ego_leads, _)) = longitudinal(w, ego, other, cfg.range) {
        return if ego_leads { Relation::Ahead } else { Relation::Behind };
    }
    let lane = w.graph().lane(ego.lane());
    if lane.left == Some(other.lane()) {
        return Relation::Left;
    }
    if lane.right == Some(other.lane()) {
        return Relation::Right;
    }
    let (merges, crossings) = shared_conflicts(w, ego, other, cfg.range);
    if !merges.is_empty() {
        Relation::Merge
    } else if !crossings.is_empty() {
        Relation::Crossing
    } else {
        Relation::Irrelevant
    }
}

/// Constant-speed occupancy window `[enter, leave)` of a zone.
fn window(dist_in: f64, dist_out: f64, v: f64) -> Option<(f64, f64)> {
    if dist_in <= 0.0 {
        let leave = if v > 1e-9 { dist_out / v } else { f64::INFINITY };
        Some((0.0, leave))
    } else if v > 1e-9 {
        Some((dist_in / v, dist_out / v))
    } else {
        None
    }
}

/// Time to collision under constant speeds, capped at `cfg.ttc_cap`.
pub fn compute_ttc(w: &World, ego: &Vehicle, other: &Vehicle, relation: Relation, cfg: &FeatureConfig) -> f64 {
    let floor = 1e-3;
    let t = match relation {
        Relation::Ahead | Relation::Behind => {
            let (lead, follow) = if relation == Relation::Ahead { (other, ego) } else { (ego, other) };
            match forward_gap(w, follow, lead, cfg.range) {
                Some(d) => {
                    let gap = d - lead.length;
                    let closing = follow.v - lead.v;
                    if closing > 0.0 {
                        gap.max(0.0) / closing
                    } else if gap <= 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                }
                None => f64::INFINITY,
            }
        }
        Relation::Merge | Relation::Crossing => {
            let (m, c) = shared_conflicts(w, ego, other, cfg.range);
            m.iter()
                .chain(&c)
                .filter_map(|z| {
                    let (a0, a1) = window(z[0], z[1], ego.v)?;
                    let (b0, b1) = window(z[2], z[3], other.v)?;
                    let start = a0.max(b0);
                    (start < a1.min(b1)).then_some(start)
                })
                .fold(f64::INFINITY, f64::min)
        }
        Relation::Left | Relation::Right | Relation::Irrelevant => f64::INFINITY,
    };
    t.clamp(floor, cfg.ttc_cap)
}

fn distance_to_junction(w: &World, v: &Vehicle, cfg: &FeatureConfig) -> (f64, bool) {
    if w.graph().lane(v.lane()).internal {
        (0.0, true)
    } else {
        (w.distance_to_junction(v).unwrap_or(cfg.distance_scale).max(0.0), false)
    }
}

/// Signed lane offset from the nearest lane allowing the assigned turn.
pub fn lane_gap(graph: &LaneGraph, ego: &Vehicle) -> i32 {
    let lane = graph.lane(ego.lane());
    if lane.internal || graph.allowed_turns(lane.id).is_empty() || graph.allowed_turns(lane.id).contains(&ego.intended) {
        return 0;
    }
    let ok = |l: LaneId| graph.allowed_turns(l).contains(&ego.intended);
    let walk = |step: fn(&crate::sim::Lane) -> Option<LaneId>| {
        let mut cur = step(lane);
        let mut n = 1;
        while let Some(l) = cur {
            if ok(l) {
                return Some(n);
            }
            cur = step(graph.lane(l));
            n += 1;
        }
        None
    };
    match (walk(|l| l.left), walk(|l| l.right)) {
        (Some(left), Some(right)) if right < left => -right,
        (Some(left), _) => left,
        (None, Some(right)) => -right,
        (None, None) => 0,
    }
}

pub fn ego_observation(w: &World, ego: &Vehicle, cfg: &FeatureConfig) -> EgoObservation {
    let lane = w.graph().lane(ego.lane());
    let (d, in_intersection) = distance_to_junction(w, ego, cfg);
    EgoObservation {
        v: ego.v,
        d,
        in_intersection,
        left_lane: lane.left.is_some(),
        right_lane: lane.right.is_some(),
        lane_gap: lane_gap(w.graph(), ego),
        speed_limit: lane.speed_limit,
    }
}

/// Featurizes the `cfg.slots` vehicles nearest to the ego. Returns `None`
/// when there is no ego.
pub fn featurize(w: &World, cfg: &FeatureConfig) -> Option<Observation> {
    let ego = w.ego()?;
    let pe = w.position(ego);
    let he = w.heading(ego);
    let (sin, cos) = he.sin_cos();
    let mut others: Vec<(f64, &Vehicle)> =
        w.vehicles().iter().filter(|v| v.id != ego.id).map(|v| ((w.position(v) - pe).norm(), v)).collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
    others.truncate(cfg.slots);
    let holders = w.priority_holders();
    let mut slots: Vec<Option<VehicleObservation>> = others
        .into_iter()
        .map(|(_, o)| {
            let rel = to_ego_frame(w.position(o) - pe, sin, cos);
            let lane = w.graph().lane(o.lane());
            let (d, in_intersection) = distance_to_junction(w, o, cfg);
            let relation = classify_relation(w, ego, o, cfg);
            Some(VehicleObservation {
                id: o.id,
                v: o.v - ego.v,
                d,
                in_intersection,
                left_lane: lane.left.is_some(),
                right_lane: lane.right.is_some(),
                x: rel.0,
                y: rel.1,
                heading: wrap_angle(w.heading(o) - he),
                has_priority: holders.binary_search(&o.id).is_ok(),
                ttc: compute_ttc(w, ego, o, relation, cfg),
                turn_signal: o.signal,
                braking: o.braking,
                relation,
            })
        })
        .collect();
    slots.resize(cfg.slots, None);
    Some(Observation { ego: ego_observation(w, ego, cfg), slots })
}

fn to_ego_frame(d: crate::sim::geometry::Vec2, sin: f64, cos: f64) -> (f64, f64) {
    (cos * d.x + sin * d.y, -sin * d.x + cos * d.y)
}
