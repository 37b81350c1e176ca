use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::driver::{idm_accel, time_to_cover};
use super::geometry::Vec2;
use super::map::{ConflictKind, LaneGraph, LaneId, LaneKind, Turn};
use super::{build_map, Action, SimConfig, SimError};

pub type VehicleId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Controller {
    Ego,
    RuleBased,
    /// Holds its speed and ignores everything; used for scripted scenes.
    Cruise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub lanes: Vec<LaneId>,
    /// Manoeuvre the lane sequence actually performs.
    pub turn: Turn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub id: VehicleId,
    pub route: Route,
    /// Index into `route.lanes` of the lane holding the front bumper.
    pub idx: usize,
    /// Front bumper position along the current lane (m).
    pub s: f64,
    pub v: f64,
    pub accel: f64,
    pub length: f64,
    pub max_speed: f64,
    pub controller: Controller,
    /// Manoeuvre the driver wants; differs from `route.turn` when the
    /// vehicle sits in a lane that cannot make it.
    pub intended: Turn,
    pub braking: bool,
    /// Turn signal; straight when not signalling.
    pub signal: Turn,
    /// Whether the driver is currently committed to entering the junction.
    pub proceeding: bool,
}

impl Vehicle {
    pub fn lane(&self) -> LaneId {
        self.route.lanes[self.idx]
    }

    pub fn is_ego(&self) -> bool {
        self.controller == Controller::Ego
    }
}

/// Part of a vehicle body on one lane, as an arc-length interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub lane: LaneId,
    pub lo: f64,
    pub hi: f64,
}

/// A conflict zone on a vehicle's route that its rear has not yet cleared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Upcoming {
    pub conflict: usize,
    pub kind: ConflictKind,
    pub lane: LaneId,
    pub other: LaneId,
    /// Front-bumper distance to the zone start (negative once inside).
    pub dist_in: f64,
    /// Front-bumper distance until the rear leaves the zone.
    pub dist_out: f64,
}

impl Upcoming {
    pub fn occupied(&self) -> bool {
        self.dist_in <= 0.0 && self.dist_out > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalCause {
    Collision,
    RouteComplete,
    Timeout,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepEvents {
    pub collision: bool,
    pub partner: Option<VehicleId>,
    pub route_complete: bool,
    pub timeout: bool,
    pub exited: Vec<VehicleId>,
    /// The set of vehicles holding right of way over the ego changed.
    pub row_changed: bool,
    pub road_changed: bool,
    pub yield_violation: bool,
    /// The ego entered the junction through a lane that cannot make its
    /// intended turn.
    pub wrong_turn: bool,
    /// A lane change was requested where none is possible; treated as a no-op.
    pub illegal_action: bool,
    /// Ego is stopped although it holds right of way and its path is clear.
    pub failed_to_proceed: bool,
    pub background_collisions: usize,
    pub terminal: Option<TerminalCause>,
}

#[derive(Debug, Clone, Default)]
struct Index {
    footprints: Vec<Vec<Footprint>>,
    /// Per lane: (vehicle index, lo, hi).
    on_lane: Vec<Vec<(usize, f64, f64)>>,
    upcoming: Vec<Vec<Upcoming>>,
    /// Per conflict: (vehicle index, position in `upcoming`).
    by_conflict: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone)]
pub struct World {
    graph: Arc<LaneGraph>,
    cfg: SimConfig,
    rng: ChaCha8Rng,
    time: f64,
    vehicles: Vec<Vehicle>,
    next_id: VehicleId,
    ego: Option<VehicleId>,
    ego_steps: u64,
    spawn_rate: f64,
    prev_holders: Vec<VehicleId>,
    prev_zones: Vec<usize>,
    prev_road: Option<usize>,
    background_collisions: u64,
    index: Index,
}

impl World {
    pub fn new(graph: Arc<LaneGraph>, cfg: SimConfig, seed: u64) -> Result<World, SimError> {
        cfg.validate()?;
        if graph.kind != cfg.map.kind {
            return Err(SimError::Config(format!("graph is {:?} but config asks for {:?}", graph.kind, cfg.map.kind)));
        }
        let mut w = World {
            graph,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            time: 0.0,
            vehicles: Vec::new(),
            next_id: 0,
            ego: None,
            ego_steps: 0,
            spawn_rate: 0.0,
            prev_holders: Vec::new(),
            prev_zones: Vec::new(),
            prev_road: None,
            background_collisions: 0,
            index: Index::default(),
        };
        w.spawn_rate = w.draw_spawn_rate();
        Ok(w)
    }

    pub fn from_config(cfg: SimConfig, seed: u64) -> Result<World, SimError> {
        let graph = Arc::new(build_map(&cfg.map)?);
        World::new(graph, cfg, seed)
    }

    pub fn graph(&self) -> &LaneGraph {
        &self.graph
    }

    pub fn graph_arc(&self) -> Arc<LaneGraph> {
        self.graph.clone()
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn vehicle(&self, id: VehicleId) -> Option<&Vehicle> {
        self.position_of(id).map(|i| &self.vehicles[i])
    }

    fn position_of(&self, id: VehicleId) -> Option<usize> {
        self.vehicles.binary_search_by_key(&id, |v| v.id).ok()
    }

    pub fn ego_id(&self) -> Option<VehicleId> {
        self.ego
    }

    pub fn ego(&self) -> Option<&Vehicle> {
        self.ego.and_then(|id| self.vehicle(id))
    }

    pub fn spawn_rate(&self) -> f64 {
        self.spawn_rate
    }

    pub fn set_spawn_rate(&mut self, rate: f64) {
        self.spawn_rate = rate.max(0.0);
    }

    /// Collisions among surrounding vehicles since construction.
    pub fn background_collisions(&self) -> u64 {
        self.background_collisions
    }

    pub fn ego_elapsed(&self) -> f64 {
        self.ego_steps as f64 * self.cfg.dt
    }

    fn draw_spawn_rate(&mut self) -> f64 {
        let s = &self.cfg.spawn;
        if s.rate_max > s.rate_min {
            self.rng.random_range(s.rate_min..s.rate_max)
        } else {
            s.rate_min
        }
    }

    /// Clears the scene and reseeds; the spawn rate is redrawn.
    pub fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.time = 0.0;
        self.vehicles.clear();
        self.next_id = 0;
        self.ego = None;
        self.ego_steps = 0;
        self.prev_holders.clear();
        self.prev_zones.clear();
        self.prev_road = None;
        self.spawn_rate = self.draw_spawn_rate();
    }

    /// Reset, warm up surrounding traffic, then insert the ego on a random
    /// arm and lane with a random intended turn.
    pub fn begin_episode(&mut self, seed: u64) -> Result<VehicleId, SimError> {
        self.reset(seed);
        let warm = (self.cfg.spawn.warmup / self.cfg.dt).round() as usize;
        for _ in 0..warm {
            self.step_traffic()?;
        }
        let n_arms = self.graph.entries().len();
        for attempt in 0..400 {
            let arm = self.rng.random_range(0..n_arms);
            let lanes = self.graph.entries()[arm].clone();
            let lane = lanes[self.rng.random_range(0..lanes.len())];
            let intended = Turn::ALL[self.rng.random_range(0..3)];
            let s = self.cfg.vehicle_length;
            if self.entry_clearance(lane) > s + 15.0 {
                return self.insert_ego(lane, intended, s, self.cfg.ego_initial_speed);
            }
            if attempt % 4 == 3 {
                self.step_traffic()?;
            }
        }
        Err(SimError::World("no free entry for the ego".into()))
    }

    /// Distance from the lane start to the nearest body on the lane.
    fn entry_clearance(&self, lane: LaneId) -> f64 {
        let mut best = f64::INFINITY;
        for v in &self.vehicles {
            for f in self.footprint(v) {
                if f.lane == lane {
                    best = best.min(f.lo);
                }
            }
        }
        best
    }

    fn route_for(&self, lane: LaneId, turn: Turn) -> Result<Route, SimError> {
        if let Some(t) = self.graph.route_from(lane, turn) {
            return Ok(Route { lanes: t.lanes.clone(), turn });
        }
        let allowed = self.graph.allowed_turns(lane);
        let turn = *allowed.first().ok_or_else(|| SimError::World(format!("lane {lane} starts no route")))?;
        let t = self.graph.route_from(lane, turn).expect("allowed turn has a route");
        Ok(Route { lanes: t.lanes.clone(), turn })
    }

    fn push_vehicle(&mut self, mut v: Vehicle) -> VehicleId {
        v.id = self.next_id;
        self.next_id += 1;
        let id = v.id;
        self.vehicles.push(v);
        id
    }

    /// Inserts a vehicle at the start of the route from `lane` making `turn`.
    pub fn spawn_vehicle(
        &mut self,
        lane: LaneId,
        turn: Turn,
        s: f64,
        v: f64,
        max_speed: f64,
        controller: Controller,
    ) -> Result<VehicleId, SimError> {
        if lane >= self.graph.lanes().len() {
            return Err(SimError::World(format!("unknown lane {lane}")));
        }
        if controller == Controller::Ego && self.ego.is_some() {
            return Err(SimError::World("world already has an ego".into()));
        }
        let route = self.route_for(lane, turn)?;
        if !(0.0..=self.graph.lane(lane).length()).contains(&s) || !(v >= 0.0 && v <= self.cfg.speed_cap) {
            return Err(SimError::World(format!("bad initial state s={s} v={v}")));
        }
        let vehicle = Vehicle {
            id: 0,
            signal: Turn::Straight,
            route,
            idx: 0,
            s,
            v,
            accel: 0.0,
            length: self.cfg.vehicle_length,
            max_speed,
            controller,
            intended: turn,
            braking: false,
            proceeding: true,
        };
        let id = self.push_vehicle(vehicle);
        self.rebuild_index();
        if controller == Controller::Ego {
            self.ego = Some(id);
            self.ego_steps = 0;
            self.prev_holders = self.priority_holders();
            self.prev_zones = self.ego_zones();
            self.prev_road = self.ego().map(|e| self.graph.lane(e.lane()).road);
        }
        Ok(id)
    }

    pub fn insert_ego(&mut self, lane: LaneId, intended: Turn, s: f64, v: f64) -> Result<VehicleId, SimError> {
        let cap = self.cfg.speed_cap;
        let id = self.spawn_vehicle(lane, intended, s, v, cap, Controller::Ego)?;
        Ok(id)
    }

    /// Removes a vehicle; returns whether it existed.
    pub fn remove_vehicle(&mut self, id: VehicleId) -> bool {
        match self.position_of(id) {
            Some(i) => {
                self.vehicles.remove(i);
                if self.ego == Some(id) {
                    self.ego = None;
                }
                true
            }
            None => false,
        }
    }

    pub fn position(&self, v: &Vehicle) -> Vec2 {
        self.graph.lane(v.lane()).line.point_at(v.s)
    }

    pub fn heading(&self, v: &Vehicle) -> f64 {
        self.graph.lane(v.lane()).line.heading_at(v.s)
    }

    /// Body intervals, projecting the rear onto earlier route lanes.
    pub fn footprint(&self, v: &Vehicle) -> Vec<Footprint> {
        let mut out = Vec::with_capacity(2);
        let lane = v.lane();
        out.push(Footprint { lane, lo: (v.s - v.length).max(0.0), hi: v.s });
        let mut rest = v.length - v.s;
        let mut j = v.idx;
        while rest > 0.0 && j > 0 {
            j -= 1;
            let l = v.route.lanes[j];
            let len = self.graph.lane(l).length();
            out.push(Footprint { lane: l, lo: (len - rest).max(0.0), hi: len });
            rest -= len;
        }
        out
    }

    /// Signed distance from the front bumper to arc length `x` on route
    /// lane `j` (negative when already passed).
    pub fn distance_along(&self, v: &Vehicle, j: usize, x: f64) -> f64 {
        self.lane_starts(v)[j] + x
    }

    fn lane_starts(&self, v: &Vehicle) -> Vec<f64> {
        let n = v.route.lanes.len();
        let mut starts = vec![0.0; n];
        starts[v.idx] = -v.s;
        for j in v.idx + 1..n {
            starts[j] = starts[j - 1] + self.graph.lane(v.route.lanes[j - 1]).length();
        }
        for j in (0..v.idx).rev() {
            starts[j] = starts[j + 1] - self.graph.lane(v.route.lanes[j]).length();
        }
        starts
    }

    /// Distance to the start of the next junction section, if the vehicle
    /// is not already inside one.
    pub fn distance_to_junction(&self, v: &Vehicle) -> Option<f64> {
        if self.graph.lane(v.lane()).internal {
            return None;
        }
        let starts = self.lane_starts(v);
        (v.idx + 1..v.route.lanes.len()).find(|j| self.graph.lane(v.route.lanes[*j]).internal).map(|j| starts[j])
    }

    /// Distance to the end of the route (front bumper).
    pub fn distance_to_route_end(&self, v: &Vehicle) -> f64 {
        let last = v.route.lanes.len() - 1;
        self.distance_along(v, last, self.graph.lane(v.route.lanes[last]).length())
    }

    /// Conflict zones ahead of (or under) the vehicle within `range`.
    pub fn upcoming_conflicts(&self, v: &Vehicle, range: f64) -> Vec<Upcoming> {
        let starts = self.lane_starts(v);
        let mut out = Vec::new();
        for (j, &lane) in v.route.lanes.iter().enumerate() {
            if starts[j] > range {
                break;
            }
            for c in self.graph.conflicts_of(lane) {
                let dist_in = starts[j] + c.zone.0;
                let dist_out = starts[j] + c.zone.1 + v.length;
                if dist_out > 0.0 && dist_in < range {
                    out.push(Upcoming { conflict: c.id, kind: c.kind, lane, other: c.other, dist_in, dist_out });
                }
            }
        }
        out
    }

    /// Nearest body ahead on the route as `(gap, speed, id)`.
    pub fn leader(&self, v: &Vehicle, range: f64) -> Option<(f64, f64, VehicleId)> {
        self.leader_indexed(self.position_of(v.id)?, range)
    }

    fn rebuild_index(&mut self) {
        let n_lanes = self.graph.lanes().len();
        let n_conf = self.graph.conflicts().len();
        let mut idx = Index {
            footprints: Vec::with_capacity(self.vehicles.len()),
            on_lane: vec![Vec::new(); n_lanes],
            upcoming: Vec::with_capacity(self.vehicles.len()),
            by_conflict: vec![Vec::new(); n_conf],
        };
        let range = self.cfg.driver.lookahead;
        for (i, v) in self.vehicles.iter().enumerate() {
            let fp = self.footprint(v);
            for f in &fp {
                idx.on_lane[f.lane].push((i, f.lo, f.hi));
            }
            idx.footprints.push(fp);
            let up = self.upcoming_conflicts(v, range);
            for (k, u) in up.iter().enumerate() {
                idx.by_conflict[u.conflict].push((i, k));
            }
            idx.upcoming.push(up);
        }
        self.index = idx;
    }

    fn leader_indexed(&self, i: usize, range: f64) -> Option<(f64, f64, VehicleId)> {
        let v = &self.vehicles[i];
        let starts = self.lane_starts(v);
        let mut best: Option<(f64, f64, VehicleId)> = None;
        for j in v.idx..v.route.lanes.len() {
            if starts[j] > range {
                break;
            }
            for &(k, lo, hi) in &self.index.on_lane[v.route.lanes[j]] {
                if k == i || (j == v.idx && hi <= v.s) {
                    continue;
                }
                let gap = starts[j] + lo;
                if best.is_none_or(|b| gap < b.0) {
                    best = Some((gap, self.vehicles[k].v, self.vehicles[k].id));
                }
            }
            if best.is_some() {
                break;
            }
        }
        best
    }

    fn accel_guess(&self, w: &Vehicle) -> f64 {
        match w.controller {
            Controller::Ego => self.cfg.action_accels[5],
            Controller::RuleBased => self.cfg.driver.max_accel,
            Controller::Cruise => 0.0,
        }
    }

    /// Estimated time for `w` to reach the start of its zone.
    fn arrival_time(&self, w: &Vehicle, u: &Upcoming) -> f64 {
        match w.controller {
            Controller::RuleBased => time_to_cover(u.dist_in, w.v, self.accel_guess(w), self.desired_speed(w).max(w.v)),
            _ => time_to_cover(u.dist_in, w.v, self.accel_guess(w), self.cfg.speed_cap),
        }
    }

    fn committed(&self, w: &Vehicle) -> bool {
        match w.controller {
            Controller::RuleBased => w.proceeding,
            Controller::Ego => w.v > 0.5,
            Controller::Cruise => true,
        }
    }

    fn desired_speed(&self, v: &Vehicle) -> f64 {
        v.max_speed.min(self.graph.lane(v.lane()).speed_limit)
    }

    /// Slowest speed limit between the vehicle and `dist` ahead.
    fn min_limit_until(&self, v: &Vehicle, starts: &[f64], dist: f64) -> f64 {
        let mut lim = self.desired_speed(v);
        for j in v.idx + 1..v.route.lanes.len() {
            if starts[j] > dist {
                break;
            }
            lim = lim.min(self.graph.lane(v.route.lanes[j]).speed_limit);
        }
        lim
    }

    /// Acceleration of a rule-based driver and whether it proceeds into
    /// the junction.
    fn rule_based(&self, i: usize) -> (f64, bool) {
        let p = &self.cfg.driver;
        let v = &self.vehicles[i];
        let v0 = self.desired_speed(v);
        let leader = self.leader_indexed(i, p.lookahead);
        let mut a = idm_accel(p, v.v, v0, leader.map(|(g, vl, _)| (g, vl)));
        let starts = self.lane_starts(v);

        // Slow down ahead of lanes with a lower speed limit.
        for j in v.idx + 1..v.route.lanes.len() {
            let d = starts[j];
            if d > 60.0 {
                break;
            }
            let lim = self.graph.lane(v.route.lanes[j]).speed_limit;
            if v.v > lim {
                a = a.min(-(v.v * v.v - lim * lim) / (2.0 * d.max(1.0)));
            }
        }

        let stop_line = self.distance_to_junction(v);
        let mut stop_at: Option<f64> = None;
        for u in &self.index.upcoming[i] {
            if u.dist_in <= 0.0 {
                continue;
            }
            let prio = self.graph.has_priority(u.lane, u.other);
            let v_clear = self.min_limit_until(v, &starts, u.dist_out);
            let t_clear = time_to_cover(u.dist_out, v.v, p.max_accel, v_clear);
            let mut blocked = false;
            // Do not enter a zone that a slow leader keeps us from clearing.
            if let Some((gap, vl, _)) = leader {
                if vl < 3.0 && gap < u.dist_out + p.min_gap {
                    blocked = true;
                }
            }
            for &(k, n) in &self.index.by_conflict[u.conflict] {
                if blocked {
                    break;
                }
                let wu = &self.index.upcoming[k][n];
                if k == i || wu.lane != u.other {
                    continue;
                }
                let w = &self.vehicles[k];
                if wu.occupied() {
                    blocked = true;
                } else if prio {
                    if self.committed(w) && self.arrival_time(w, wu) < t_clear + p.priority_margin {
                        blocked = true;
                    }
                } else if self.arrival_time(w, wu) < t_clear + p.yield_margin {
                    blocked = true;
                }
            }
            if blocked {
                let at = match stop_line {
                    Some(sl) if sl <= u.dist_in => sl,
                    _ => u.dist_in,
                };
                stop_at = Some(stop_at.map_or(at, |s: f64| s.min(at)));
            }
        }

        let mut proceeding = true;
        if let Some(d) = stop_at {
            // A driver already under way that can no longer stop keeps going.
            let can_stop = d > 0.0 && v.v * v.v / (2.0 * d) <= p.commit_decel;
            if can_stop || !v.proceeding || v.v < 0.1 {
                let target = d + p.min_gap - 0.5;
                a = a.min(idm_accel(p, v.v, v0, Some((target, 0.0))));
                proceeding = false;
            }
        }
        (a.clamp(-p.max_decel, p.max_accel), proceeding)
    }

    fn advance(&mut self, i: usize, a: f64, dt: f64) {
        let cap = self.cfg.speed_cap;
        let v = &mut self.vehicles[i];
        let v1 = v.v + a * dt;
        let ds = if v1 < 0.0 {
            // Stops within the step.
            if a < 0.0 {
                v.v * v.v / (-2.0 * a)
            } else {
                0.0
            }
        } else if v1 > cap {
            let tc = if a > 0.0 { (cap - v.v) / a } else { 0.0 };
            v.v * tc + 0.5 * a * tc * tc + cap * (dt - tc)
        } else {
            0.5 * (v.v + v1) * dt
        };
        v.v = v1.clamp(0.0, cap);
        v.s += ds;
        v.accel = a;
        v.braking = a < -0.5;
    }

    /// Moves the front across lane boundaries; returns true once the
    /// vehicle has left the end of its route.
    fn settle_lane(&mut self, i: usize) -> bool {
        loop {
            let v = &self.vehicles[i];
            let len = self.graph.lane(v.lane()).length();
            if v.s <= len {
                return false;
            }
            if v.idx + 1 >= v.route.lanes.len() {
                return true;
            }
            let v = &mut self.vehicles[i];
            v.s -= len;
            v.idx += 1;
        }
    }

    fn update_signal(&mut self, i: usize) {
        let sig = {
            let v = &self.vehicles[i];
            let near = self.graph.lane(v.lane()).internal || self.distance_to_junction(v).is_some_and(|d| d < 50.0);
            if near && self.graph.lane(v.lane()).kind != LaneKind::Exit {
                v.route.turn
            } else {
                Turn::Straight
            }
        };
        self.vehicles[i].signal = sig;
    }

    fn spawn_traffic(&mut self) {
        let rate = self.spawn_rate;
        if rate <= 0.0 {
            return;
        }
        let n_arms = self.graph.entries().len();
        let has_major = self.graph.entries().iter().any(|lanes| self.graph.lane(lanes[0]).major);
        for arm in 0..n_arms {
            let minor = has_major && !self.graph.lane(self.graph.entries()[arm][0]).major;
            let scale = if minor { self.cfg.spawn.minor_rate_scale } else { 1.0 };
            if self.rng.random::<f64>() >= rate * scale * self.cfg.dt {
                continue;
            }
            let weights = self.cfg.spawn.turn_weights;
            let total: f64 = weights.iter().sum();
            let mut x = self.rng.random::<f64>() * total;
            let mut turn = Turn::Straight;
            for (t, w) in Turn::ALL.iter().zip(weights) {
                if x < w {
                    turn = *t;
                    break;
                }
                x -= w;
            }
            let s = &self.cfg.spawn;
            let normal = Normal::new(s.speed_mean, s.speed_std.max(1e-12)).expect("validated");
            let max_speed = normal.sample(&mut self.rng).clamp(s.speed_min, s.speed_max);
            let lanes = self.graph.entries()[arm].clone();
            let Some(lane) = lanes.iter().copied().find(|l| self.graph.allowed_turns(*l).contains(&turn)) else {
                continue;
            };
            let len = self.cfg.vehicle_length;
            if self.entry_clearance(lane) < len + self.cfg.spawn.min_headway {
                continue;
            }
            let mut v0 = max_speed.min(self.graph.lane(lane).speed_limit);
            // Match a slow vehicle ahead instead of closing in at full speed.
            let mut lead: Option<(f64, f64)> = None;
            for v in &self.vehicles {
                for f in self.footprint(v) {
                    if f.lane == lane && lead.is_none_or(|l| f.lo < l.0) {
                        lead = Some((f.lo, v.v));
                    }
                }
            }
            if let Some((lo, vl)) = lead {
                if lo < 80.0 {
                    v0 = v0.min(vl);
                }
            }
            let _ = self.spawn_vehicle(lane, turn, len, v0, max_speed, Controller::RuleBased);
        }
    }

    /// Advances surrounding traffic one step; the world must have no ego.
    pub fn step_traffic(&mut self) -> Result<StepEvents, SimError> {
        if self.ego.is_some() {
            return Err(SimError::World("step_traffic called with an ego present".into()));
        }
        Ok(self.step_inner(None))
    }

    /// Applies the ego action and advances the world by one step.
    pub fn step(&mut self, action: usize) -> Result<StepEvents, SimError> {
        let action = Action::from_index(action)?;
        if self.ego.is_none() {
            return Err(SimError::NoEgo);
        }
        Ok(self.step_inner(Some(action)))
    }

    fn ego_lane_change(&mut self, ei: usize, left: bool) -> bool {
        let ego = &self.vehicles[ei];
        let lane = self.graph.lane(ego.lane());
        let target = if left { lane.left } else { lane.right };
        let Some(target) = target else { return false };
        if lane.internal {
            return false;
        }
        let route = if lane.kind == LaneKind::Approach {
            match self.route_for(target, ego.intended) {
                Ok(r) => r,
                Err(_) => return false,
            }
        } else {
            Route { lanes: vec![target], turn: ego.route.turn }
        };
        let ego = &mut self.vehicles[ei];
        ego.route = route;
        ego.idx = 0;
        true
    }

    fn step_inner(&mut self, action: Option<Action>) -> StepEvents {
        let dt = self.cfg.dt;
        let mut ev = StepEvents::default();
        let ego_idx = self.ego.and_then(|id| self.position_of(id));
        let mut ego_accel = 0.0;
        if let (Some(ei), Some(act)) = (ego_idx, action) {
            match act {
                Action::ChangeLeft | Action::ChangeRight => {
                    if !self.ego_lane_change(ei, act == Action::ChangeLeft) {
                        ev.illegal_action = true;
                    }
                }
                _ => ego_accel = self.cfg.action_accels[act.index()],
            }
        }

        self.rebuild_index();
        let n = self.vehicles.len();
        let mut accels = vec![0.0; n];
        let mut proceeding = vec![true; n];
        for i in 0..n {
            match self.vehicles[i].controller {
                Controller::RuleBased => {
                    let (a, p) = self.rule_based(i);
                    accels[i] = a;
                    proceeding[i] = p;
                }
                Controller::Ego => accels[i] = ego_accel,
                Controller::Cruise => accels[i] = 0.0,
            }
        }

        let ego_id = self.ego;
        let mut exited = Vec::new();
        for i in 0..n {
            self.vehicles[i].proceeding = proceeding[i];
            self.advance(i, accels[i], dt);
            let from = self.vehicles[i].lane();
            if self.settle_lane(i) {
                exited.push(self.vehicles[i].id);
            } else if Some(self.vehicles[i].id) == ego_id && from != self.vehicles[i].lane() {
                let v = &self.vehicles[i];
                let to = self.graph.lane(v.lane());
                if self.graph.lane(from).kind == LaneKind::Approach && to.internal && v.intended != v.route.turn {
                    ev.wrong_turn = true;
                }
            }
            self.update_signal(i);
        }
        self.time += dt;
        if ego_id.is_some() {
            self.ego_steps += 1;
        }
        for id in &exited {
            if Some(*id) == ego_id {
                ev.route_complete = true;
            } else {
                self.remove_vehicle(*id);
            }
        }
        ev.exited = exited;

        // Surrounding traffic enters after the move so new cars are
        // checked for overlap like everyone else.
        self.spawn_traffic();
        self.rebuild_index();

        let collided = self.detect_collisions();
        let mut doomed = Vec::new();
        for (a, b) in collided {
            let (ia, ib) = (self.vehicles[a].id, self.vehicles[b].id);
            if Some(ia) == ego_id || Some(ib) == ego_id {
                if !ev.collision {
                    ev.collision = true;
                    ev.partner = Some(if Some(ia) == ego_id { ib } else { ia });
                }
            } else {
                ev.background_collisions += 1;
                doomed.push(ia);
                doomed.push(ib);
            }
        }
        doomed.sort_unstable();
        doomed.dedup();
        for id in doomed {
            log::debug!("removing vehicle {id} after a collision at t={:.1}", self.time);
            self.remove_vehicle(id);
        }
        self.background_collisions += ev.background_collisions as u64;
        if ev.background_collisions > 0 {
            self.rebuild_index();
        }

        if self.ego.is_some() && !ev.route_complete {
            self.ego_events(&mut ev);
        }
        if self.ego.is_some() && self.ego_elapsed() >= self.cfg.timeout - 1e-9 {
            ev.timeout = true;
        }
        ev.terminal = if ev.collision {
            Some(TerminalCause::Collision)
        } else if ev.route_complete {
            Some(TerminalCause::RouteComplete)
        } else if ev.timeout {
            Some(TerminalCause::Timeout)
        } else {
            None
        };
        ev
    }

    /// Vehicle index pairs whose bodies overlap on a lane or that occupy
    /// both sides of a conflict zone.
    fn detect_collisions(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for occ in &self.index.on_lane {
            for x in 0..occ.len() {
                for y in x + 1..occ.len() {
                    let (a, alo, ahi) = occ[x];
                    let (b, blo, bhi) = occ[y];
                    if a != b && alo < bhi && blo < ahi {
                        pairs.push((a.min(b), a.max(b)));
                    }
                }
            }
        }
        for list in &self.index.by_conflict {
            for x in 0..list.len() {
                for y in x + 1..list.len() {
                    let (a, ka) = list[x];
                    let (b, kb) = list[y];
                    let (ua, ub) = (&self.index.upcoming[a][ka], &self.index.upcoming[b][kb]);
                    if a != b && ua.lane != ub.lane && ua.occupied() && ub.occupied() {
                        pairs.push((a.min(b), a.max(b)));
                    }
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }

    fn ego_index(&self) -> Option<usize> {
        self.ego.and_then(|id| self.position_of(id))
    }

    /// Conflicts whose ego-side zone the ego body currently occupies.
    fn ego_zones(&self) -> Vec<usize> {
        let Some(ei) = self.ego_index() else { return Vec::new() };
        let mut z: Vec<usize> = self.index.upcoming[ei].iter().filter(|u| u.occupied()).map(|u| u.conflict).collect();
        z.sort_unstable();
        z.dedup();
        z
    }

    /// Vehicles holding right of way over the ego at a conflict ahead:
    /// they occupy the conflict, or rank higher and arrive within the
    /// priority horizon.
    pub fn priority_holders(&self) -> Vec<VehicleId> {
        let Some(ei) = self.ego_index() else { return Vec::new() };
        let mut out = Vec::new();
        for u in &self.index.upcoming[ei] {
            if u.dist_in > 60.0 {
                continue;
            }
            for &(k, n) in &self.index.by_conflict[u.conflict] {
                let wu = &self.index.upcoming[k][n];
                if k == ei || wu.lane != u.other {
                    continue;
                }
                let w = &self.vehicles[k];
                let arrives = wu.dist_in / w.v.max(1.0) <= self.cfg.priority_horizon;
                if wu.occupied() || (self.graph.has_priority(u.other, u.lane) && arrives) {
                    out.push(w.id);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    fn ego_events(&mut self, ev: &mut StepEvents) {
        let ei = self.ego_index().expect("ego present");
        let ego = &self.vehicles[ei];
        let road = self.graph.lane(ego.lane()).road;
        ev.road_changed = self.prev_road.is_some_and(|r| r != road);
        self.prev_road = Some(road);

        let holders = self.priority_holders();
        ev.row_changed = holders != self.prev_holders;

        let zones = self.ego_zones();
        for u in &self.index.upcoming[ei] {
            if !u.occupied() || self.prev_zones.contains(&u.conflict) {
                continue;
            }
            for &(k, n) in &self.index.by_conflict[u.conflict] {
                let wu = &self.index.upcoming[k][n];
                if k == ei || wu.lane != u.other {
                    continue;
                }
                let w = &self.vehicles[k];
                let soon = wu.occupied() || wu.dist_in / w.v.max(0.1) <= self.cfg.yield_window;
                if self.graph.has_priority(u.other, u.lane) && soon {
                    ev.yield_violation = true;
                }
            }
        }

        if ego.v < 0.1 && holders.is_empty() {
            let leader_clear = self.leader_indexed(ei, 10.0).is_none();
            let zones_clear = self.index.upcoming[ei].iter().filter(|u| u.dist_in < 30.0).all(|u| {
                self.index.by_conflict[u.conflict].iter().all(|&(k, n)| {
                    let wu = &self.index.upcoming[k][n];
                    k == ei || wu.lane != u.other || !wu.occupied()
                })
            });
            ev.failed_to_proceed = leader_clear && zones_clear;
        }
        self.prev_holders = holders;
        self.prev_zones = zones;
    }
}
