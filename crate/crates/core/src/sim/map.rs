//! Lane graphs for the two scenario maps.
//!
//! Cross map: a major road running east-west and a minor road running
//! north-south, two lanes per direction. The rightmost approach lane allows
//! straight and right turns, the inner lane is a dedicated left-turn lane.
//! Ring map: a single-lane counter-clockwise roundabout with four one-lane
//! arms; entering traffic yields to traffic on the ring.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use super::geometry::{Polyline, Vec2};
use super::SimError;

pub type LaneId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Turn {
    Left,
    Straight,
    Right,
}

impl Turn {
    pub const ALL: [Turn; 3] = [Turn::Left, Turn::Straight, Turn::Right];

    /// Signal encoding used in features: left -1, straight 0, right +1.
    pub fn signal(self) -> f64 {
        match self {
            Turn::Left => -1.0,
            Turn::Straight => 0.0,
            Turn::Right => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneKind {
    Approach,
    Connector,
    Exit,
    Ring,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub id: LaneId,
    pub kind: LaneKind,
    pub line: Polyline,
    pub speed_limit: f64,
    /// Lanes inside the junction area; lane changes are not allowed here.
    pub internal: bool,
    pub road: usize,
    pub major: bool,
    /// Right-of-way rank; higher wins a conflict.
    pub rank: i32,
    /// 0 for the rightmost lane of a road, increasing to the left.
    pub lateral_index: usize,
    pub left: Option<LaneId>,
    pub right: Option<LaneId>,
    pub successors: Vec<LaneId>,
    pub predecessors: Vec<LaneId>,
    /// Manoeuvre performed by a connector lane.
    pub turn: Option<Turn>,
}

impl Lane {
    pub fn length(&self) -> f64 {
        self.line.length()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictKind {
    Crossing,
    Merge,
}

/// Region shared by two lanes; zones are arc-length intervals on each lane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conflict {
    pub kind: ConflictKind,
    pub a: LaneId,
    pub zone_a: (f64, f64),
    pub b: LaneId,
    pub zone_b: (f64, f64),
}

/// A conflict seen from one of its lanes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConflictView {
    pub id: usize,
    pub kind: ConflictKind,
    pub lane: LaneId,
    pub zone: (f64, f64),
    pub other: LaneId,
    pub other_zone: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteTemplate {
    pub turn: Turn,
    pub lanes: Vec<LaneId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Cross,
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub kind: MapKind,
    pub lane_width: f64,
    pub approach_length: f64,
    pub exit_length: f64,
    /// Half side of the cross junction box.
    pub junction_half: f64,
    pub ring_radius: f64,
    /// Radial gap between the ring and the arm ends.
    pub ring_clearance: f64,
    /// Angular offset (deg) of entry/exit points from each arm axis.
    pub ring_offset_deg: f64,
    pub road_speed: f64,
    pub straight_speed: f64,
    pub left_speed: f64,
    pub right_speed: f64,
    pub ring_speed: f64,
    /// Half length of a crossing conflict zone.
    pub crossing_half: f64,
    /// Length of the merge zone at the end of each merging lane.
    pub merge_length: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            kind: MapKind::Cross,
            lane_width: 3.5,
            approach_length: 100.0,
            exit_length: 80.0,
            junction_half: 10.0,
            ring_radius: 30.0,
            ring_clearance: 10.0,
            ring_offset_deg: 15.0,
            road_speed: 13.9,
            straight_speed: 13.9,
            left_speed: 9.0,
            right_speed: 6.0,
            ring_speed: 10.0,
            crossing_half: 3.0,
            merge_length: 5.0,
        }
    }
}

impl MapConfig {
    pub fn cross() -> Self {
        MapConfig::default()
    }

    pub fn ring() -> Self {
        MapConfig { kind: MapKind::Ring, ..MapConfig::default() }
    }

    fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("lane_width", self.lane_width),
            ("approach_length", self.approach_length),
            ("exit_length", self.exit_length),
            ("ring_radius", self.ring_radius),
            ("ring_clearance", self.ring_clearance),
            ("road_speed", self.road_speed),
            ("straight_speed", self.straight_speed),
            ("left_speed", self.left_speed),
            ("right_speed", self.right_speed),
            ("ring_speed", self.ring_speed),
            ("crossing_half", self.crossing_half),
            ("merge_length", self.merge_length),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::Geometry(format!("{name} must be positive, got {v}")));
            }
        }
        if self.junction_half <= 1.5 * self.lane_width + 0.5 {
            return Err(SimError::Geometry(format!(
                "junction_half {} too small for two lanes of width {}",
                self.junction_half, self.lane_width
            )));
        }
        if !(self.ring_offset_deg > 1.0 && self.ring_offset_deg < 40.0) {
            return Err(SimError::Geometry(format!("ring_offset_deg {} outside (1, 40)", self.ring_offset_deg)));
        }
        if self.ring_radius < 2.0 * self.lane_width {
            return Err(SimError::Geometry("ring_radius too small".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneGraph {
    pub kind: MapKind,
    lanes: Vec<Lane>,
    conflicts: Vec<Conflict>,
    by_lane: Vec<Vec<usize>>,
    routes: Vec<RouteTemplate>,
    /// Approach lanes grouped by arm, rightmost first.
    entries: Vec<Vec<LaneId>>,
    n_roads: usize,
}

impl LaneGraph {
    pub fn lanes(&self) -> &[Lane] {
        &self.lanes
    }

    pub fn lane(&self, id: LaneId) -> &Lane {
        &self.lanes[id]
    }

    pub fn conflicts(&self) -> &[Conflict] {
        &self.conflicts
    }

    pub fn n_roads(&self) -> usize {
        self.n_roads
    }

    /// Conflicts touching `lane`, seen from that lane.
    pub fn conflicts_of(&self, lane: LaneId) -> impl Iterator<Item = ConflictView> + '_ {
        self.by_lane[lane].iter().map(move |&id| {
            let c = &self.conflicts[id];
            if c.a == lane {
                ConflictView { id, kind: c.kind, lane, zone: c.zone_a, other: c.b, other_zone: c.zone_b }
            } else {
                ConflictView { id, kind: c.kind, lane, zone: c.zone_b, other: c.a, other_zone: c.zone_a }
            }
        })
    }

    pub fn conflict_between(&self, a: LaneId, b: LaneId) -> impl Iterator<Item = ConflictView> + '_ {
        self.conflicts_of(a).filter(move |c| c.other == b)
    }

    /// Whether traffic on `a` has right of way over traffic on `b`.
    pub fn has_priority(&self, a: LaneId, b: LaneId) -> bool {
        let (ra, rb) = (self.lanes[a].rank, self.lanes[b].rank);
        ra > rb || (ra == rb && a < b)
    }

    pub fn entries(&self) -> &[Vec<LaneId>] {
        &self.entries
    }

    pub fn routes(&self) -> &[RouteTemplate] {
        &self.routes
    }

    pub fn route_from(&self, lane: LaneId, turn: Turn) -> Option<&RouteTemplate> {
        self.routes.iter().find(|r| r.lanes[0] == lane && r.turn == turn)
    }

    pub fn allowed_turns(&self, lane: LaneId) -> Vec<Turn> {
        let mut t: Vec<Turn> = self.routes.iter().filter(|r| r.lanes[0] == lane).map(|r| r.turn).collect();
        t.sort();
        t.dedup();
        t
    }

    /// Audits structural invariants; both built maps must pass.
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Geometry(m));
        for (i, l) in self.lanes.iter().enumerate() {
            if l.id != i {
                return bad(format!("lane {i} has id {}", l.id));
            }
            if let Some(r) = l.left {
                if self.lanes[r].right != Some(i) {
                    return bad(format!("lane {i} left neighbour {r} is not symmetric"));
                }
                if (self.lanes[r].length() - l.length()).abs() > 1e-9 {
                    return bad(format!("neighbours {i} and {r} differ in length"));
                }
            }
            if let Some(r) = l.right {
                if self.lanes[r].left != Some(i) {
                    return bad(format!("lane {i} right neighbour {r} is not symmetric"));
                }
            }
            for &s in &l.successors {
                if !self.lanes[s].predecessors.contains(&i) {
                    return bad(format!("successor {s} of lane {i} lacks back edge"));
                }
                if (self.lanes[s].line.start() - l.line.end()).norm() > 1e-6 {
                    return bad(format!("lane {i} does not connect to successor {s}"));
                }
            }
        }
        for (id, c) in self.conflicts.iter().enumerate() {
            for (lane, z) in [(c.a, c.zone_a), (c.b, c.zone_b)] {
                if !(0.0 <= z.0 && z.0 < z.1 && z.1 <= self.lanes[lane].length() + 1e-9) {
                    return bad(format!("conflict {id} zone {z:?} outside lane {lane}"));
                }
            }
            if !self.by_lane[c.a].contains(&id) || !self.by_lane[c.b].contains(&id) {
                return bad(format!("conflict {id} not indexed on both lanes"));
            }
            let back = self.conflict_between(c.b, c.a).any(|v| v.id == id);
            if !back {
                return bad(format!("conflict {id} not symmetric"));
            }
        }
        for r in &self.routes {
            for w in r.lanes.windows(2) {
                if !self.lanes[w[0]].successors.contains(&w[1]) {
                    return bad(format!("route {:?} is not connected at {}->{}", r.lanes, w[0], w[1]));
                }
            }
            if self.lanes[r.lanes[0]].kind != LaneKind::Approach || self.lanes[*r.lanes.last().unwrap()].kind != LaneKind::Exit {
                return bad(format!("route {:?} must run from an approach to an exit", r.lanes));
            }
        }
        Ok(())
    }
}

struct Builder {
    cfg: MapConfig,
    lanes: Vec<Lane>,
    routes: Vec<RouteTemplate>,
    entries: Vec<Vec<LaneId>>,
    n_roads: usize,
}

impl Builder {
    fn new(cfg: &MapConfig) -> Self {
        Builder { cfg: cfg.clone(), lanes: Vec::new(), routes: Vec::new(), entries: Vec::new(), n_roads: 0 }
    }

    fn road(&mut self) -> usize {
        self.n_roads += 1;
        self.n_roads - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn lane(
        &mut self,
        kind: LaneKind,
        line: Option<Polyline>,
        speed: f64,
        road: usize,
        major: bool,
        rank: i32,
        lateral_index: usize,
        turn: Option<Turn>,
    ) -> Result<LaneId, SimError> {
        let line = line.ok_or_else(|| SimError::Geometry(format!("degenerate {kind:?} lane")))?;
        let id = self.lanes.len();
        self.lanes.push(Lane {
            id,
            kind,
            line,
            speed_limit: speed,
            internal: matches!(kind, LaneKind::Connector | LaneKind::Ring),
            road,
            major,
            rank,
            lateral_index,
            left: None,
            right: None,
            successors: Vec::new(),
            predecessors: Vec::new(),
            turn,
        });
        Ok(id)
    }

    fn link(&mut self, a: LaneId, b: LaneId) {
        self.lanes[a].successors.push(b);
        self.lanes[b].predecessors.push(a);
    }

    fn neighbours(&mut self, right: LaneId, left: LaneId) {
        self.lanes[right].left = Some(left);
        self.lanes[left].right = Some(right);
    }

    fn finish(self) -> Result<LaneGraph, SimError> {
        let conflicts = find_conflicts(&self.lanes, &self.cfg);
        let mut by_lane = vec![Vec::new(); self.lanes.len()];
        for (id, c) in conflicts.iter().enumerate() {
            by_lane[c.a].push(id);
            by_lane[c.b].push(id);
        }
        let g = LaneGraph {
            kind: self.cfg.kind,
            lanes: self.lanes,
            conflicts,
            by_lane,
            routes: self.routes,
            entries: self.entries,
            n_roads: self.n_roads,
        };
        g.validate()?;
        Ok(g)
    }
}

fn rot90(v: Vec2) -> Vec2 {
    Vec2::new(-v.y, v.x)
}

fn right_of(v: Vec2) -> Vec2 {
    Vec2::new(v.y, -v.x)
}

fn unit(angle: f64) -> Vec2 {
    Vec2::new(angle.cos(), angle.sin())
}

const ARC_SEGMENTS: usize = 24;

fn build_cross(cfg: &MapConfig) -> Result<LaneGraph, SimError> {
    let mut b = Builder::new(cfg);
    let (w, h) = (cfg.lane_width, cfg.junction_half);
    // Travel directions: east, north, west, south. East/west is the major road.
    let dirs: Vec<Vec2> = (0..4).map(|k| unit(k as f64 * FRAC_PI_2)).collect();
    let offset = |u: Vec2, lateral: usize| right_of(u) * (if lateral == 0 { 1.5 * w } else { 0.5 * w });

    let mut approach = vec![[0usize; 2]; 4];
    let mut exit = vec![[0usize; 2]; 4];
    for (k, &u) in dirs.iter().enumerate() {
        let major = k % 2 == 0;
        let road = b.road();
        for lat in 0..2 {
            let off = offset(u, lat);
            let line = Polyline::line(-u * (h + cfg.approach_length) + off, -u * h + off);
            approach[k][lat] = b.lane(LaneKind::Approach, line, cfg.road_speed, road, major, 0, lat, None)?;
        }
        b.neighbours(approach[k][0], approach[k][1]);
        b.entries.push(approach[k].to_vec());
    }
    for (k, &u) in dirs.iter().enumerate() {
        let major = k % 2 == 0;
        let road = b.road();
        for lat in 0..2 {
            let off = offset(u, lat);
            let line = Polyline::line(u * h + off, u * (h + cfg.exit_length) + off);
            exit[k][lat] = b.lane(LaneKind::Exit, line, cfg.road_speed, road, major, 0, lat, None)?;
        }
        b.neighbours(exit[k][0], exit[k][1]);
    }
    let junction = b.road();
    for (k, &u) in dirs.iter().enumerate() {
        let major = k % 2 == 0;
        let base = if major { 10 } else { 0 };
        for turn in Turn::ALL {
            let (from_lat, to_dir, to_lat, speed) = match turn {
                Turn::Straight => (0, k, 0, cfg.straight_speed),
                Turn::Right => (0, (k + 3) % 4, 0, cfg.right_speed),
                Turn::Left => (1, (k + 1) % 4, 1, cfg.left_speed),
            };
            let from = approach[k][from_lat];
            let to = exit[to_dir][to_lat];
            let (p0, p1) = (b.lanes[from].line.end(), b.lanes[to].line.start());
            let line = match turn {
                Turn::Straight => Polyline::line(p0, p1),
                Turn::Left => Polyline::quarter_turn(p0, u, p1, true, ARC_SEGMENTS),
                Turn::Right => Polyline::quarter_turn(p0, u, p1, false, ARC_SEGMENTS),
            };
            let rank = base + i32::from(turn != Turn::Left);
            let c = b.lane(LaneKind::Connector, line, speed, junction, major, rank, 0, Some(turn))?;
            b.link(from, c);
            b.link(c, to);
            b.routes.push(RouteTemplate { turn, lanes: vec![from, c, to] });
        }
    }
    b.finish()
}

fn build_ring(cfg: &MapConfig) -> Result<LaneGraph, SimError> {
    let mut b = Builder::new(cfg);
    let (w, r) = (cfg.lane_width, cfg.ring_radius);
    let arm_r = r + cfg.ring_clearance;
    let delta = cfg.ring_offset_deg.to_radians();
    let arms: Vec<f64> = (0..4).map(|k| k as f64 * FRAC_PI_2).collect();

    let mut inbound = Vec::new();
    let mut outbound = Vec::new();
    for &phi in &arms {
        let axis = unit(phi);
        let road = b.road();
        let u = -axis;
        let off = right_of(u) * (0.5 * w);
        let line = Polyline::line(axis * (arm_r + cfg.approach_length) + off, axis * arm_r + off);
        let id = b.lane(LaneKind::Approach, line, cfg.road_speed, road, false, 0, 0, None)?;
        inbound.push(id);
        b.entries.push(vec![id]);
    }
    for &phi in &arms {
        let axis = unit(phi);
        let road = b.road();
        let off = right_of(axis) * (0.5 * w);
        let line = Polyline::line(axis * arm_r + off, axis * (arm_r + cfg.exit_length) + off);
        outbound.push(b.lane(LaneKind::Exit, line, cfg.road_speed, road, false, 0, 0, None)?);
    }
    let ring_road = b.road();
    // Cut points in counter-clockwise order: exit of arm k, entry of arm k.
    let cuts: Vec<f64> = arms.iter().flat_map(|&phi| [phi - delta, phi + delta]).collect();
    let mut segments = Vec::new();
    for (j, &a0) in cuts.iter().enumerate() {
        let a1 = if j + 1 < cuts.len() { cuts[j + 1] } else { cuts[0] + 2.0 * PI };
        let n = ((a1 - a0) / (PI / 48.0)).ceil().max(2.0) as usize;
        let line = Polyline::arc(Vec2::zeros(), unit(a0) * r, a1 - a0, n);
        segments.push(b.lane(LaneKind::Ring, line, cfg.ring_speed, ring_road, true, 100, 0, None)?);
    }
    let n_seg = segments.len();
    for j in 0..n_seg {
        b.link(segments[j], segments[(j + 1) % n_seg]);
    }
    let mut entry_conn = Vec::new();
    let mut exit_conn = Vec::new();
    for (k, &phi) in arms.iter().enumerate() {
        let p0 = b.lanes[inbound[k]].line.end();
        let q = unit(phi + delta) * r;
        let tq = rot90(unit(phi + delta));
        let line = Polyline::bezier(p0, -unit(phi), q, tq, 32);
        let c = b.lane(LaneKind::Connector, line, cfg.ring_speed, ring_road, false, 0, 0, Some(Turn::Right))?;
        b.link(inbound[k], c);
        // Segment 2k+1 starts at the entry point of arm k.
        b.link(c, segments[2 * k + 1]);
        entry_conn.push(c);

        let q = unit(phi - delta) * r;
        let tq = rot90(unit(phi - delta));
        let p1 = b.lanes[outbound[k]].line.start();
        let line = Polyline::bezier(q, tq, p1, unit(phi), 32);
        let c = b.lane(LaneKind::Connector, line, cfg.ring_speed, ring_road, true, 100, 0, Some(Turn::Right))?;
        // Segment 2k ends at the exit point of arm k (segment 2k-1 mod n).
        b.link(segments[(2 * k + n_seg - 1) % n_seg], c);
        b.link(c, outbound[k]);
        exit_conn.push(c);
    }
    for k in 0..4 {
        for hops in 1..4usize {
            let to = (k + hops) % 4;
            let turn = match hops {
                1 => Turn::Right,
                2 => Turn::Straight,
                _ => Turn::Left,
            };
            let mut lanes = vec![inbound[k], entry_conn[k]];
            let mut seg = 2 * k + 1;
            loop {
                lanes.push(segments[seg]);
                if (seg + 1) % n_seg == 2 * to {
                    break;
                }
                seg = (seg + 1) % n_seg;
            }
            lanes.push(exit_conn[to]);
            lanes.push(outbound[to]);
            b.routes.push(RouteTemplate { turn, lanes });
        }
    }
    b.finish()
}

/// Crossings between internal lanes plus merges of lanes sharing a
/// successor. Touching endpoints (sequential or diverging lanes) are not
/// conflicts.
fn find_conflicts(lanes: &[Lane], cfg: &MapConfig) -> Vec<Conflict> {
    let mut out = Vec::new();
    let internal: Vec<&Lane> = lanes.iter().filter(|l| l.internal).collect();
    for (i, a) in internal.iter().enumerate() {
        for b in &internal[i + 1..] {
            let (la, lb) = (a.length(), b.length());
            let near_end = |s: f64, len: f64| s < 0.5 || s > len - 0.5;
            let mut zones: Vec<((f64, f64), (f64, f64))> = Vec::new();
            for (sa, sb) in a.line.intersections(&b.line) {
                if near_end(sa, la) && near_end(sb, lb) {
                    continue;
                }
                let za = ((sa - cfg.crossing_half).max(0.0), (sa + cfg.crossing_half).min(la));
                let zb = ((sb - cfg.crossing_half).max(0.0), (sb + cfg.crossing_half).min(lb));
                // Nearby crossings of the same pair merge into one zone.
                if let Some(z) = zones.iter_mut().find(|(x, y)| x.0 <= za.1 && za.0 <= x.1 && y.0 <= zb.1 && zb.0 <= y.1) {
                    z.0 = (z.0 .0.min(za.0), z.0 .1.max(za.1));
                    z.1 = (z.1 .0.min(zb.0), z.1 .1.max(zb.1));
                } else {
                    zones.push((za, zb));
                }
            }
            for (za, zb) in zones {
                out.push(Conflict { kind: ConflictKind::Crossing, a: a.id, zone_a: za, b: b.id, zone_b: zb });
            }
            if a.successors.iter().any(|s| b.successors.contains(s)) {
                let za = ((la - cfg.merge_length).max(0.0), la);
                let zb = ((lb - cfg.merge_length).max(0.0), lb);
                out.push(Conflict { kind: ConflictKind::Merge, a: a.id, zone_a: za, b: b.id, zone_b: zb });
            }
        }
    }
    out
}

pub fn build_map(cfg: &MapConfig) -> Result<LaneGraph, SimError> {
    cfg.validate()?;
    match cfg.kind {
        MapKind::Cross => build_cross(cfg),
        MapKind::Ring => build_ring(cfg),
    }
}
