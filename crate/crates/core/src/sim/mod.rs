//! Deterministic point-mass traffic simulator on lane graphs.

mod driver;
pub mod geometry;
mod map;
mod trajectory;
mod world;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use driver::{idm_accel, DriverParams};
pub use map::{
    build_map, Conflict, ConflictKind, ConflictView, Lane, LaneGraph, LaneId, LaneKind, MapConfig, MapKind, RouteTemplate, Turn,
};
pub use trajectory::TrajectoryWriter;
pub use world::{Controller, Footprint, Route, StepEvents, TerminalCause, Vehicle, VehicleId, World};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("invalid world state: {0}")]
    World(String),
    #[error("action index {0} out of range")]
    BadAction(usize),
    #[error("no ego vehicle in the world")]
    NoEgo,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const N_ACTIONS: usize = 9;

/// Discrete ego actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    MaxDecel,
    MedDecel,
    MinDecel,
    Maintain,
    MinAccel,
    MedAccel,
    MaxAccel,
    ChangeRight,
    ChangeLeft,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [
        Action::MaxDecel,
        Action::MedDecel,
        Action::MinDecel,
        Action::Maintain,
        Action::MinAccel,
        Action::MedAccel,
        Action::MaxAccel,
        Action::ChangeRight,
        Action::ChangeLeft,
    ];

    pub fn from_index(i: usize) -> Result<Action, SimError> {
        Action::ALL.get(i).copied().ok_or(SimError::BadAction(i))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_lane_change(self) -> bool {
        matches!(self, Action::ChangeLeft | Action::ChangeRight)
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::MaxDecel => "max_decel",
            Action::MedDecel => "med_decel",
            Action::MinDecel => "min_decel",
            Action::Maintain => "maintain",
            Action::MinAccel => "min_accel",
            Action::MedAccel => "med_accel",
            Action::MaxAccel => "max_accel",
            Action::ChangeRight => "change_right",
            Action::ChangeLeft => "change_left",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpawnConfig {
    /// Per-episode entry rate (vehicles/s per arm) is uniform in this range.
    pub rate_min: f64,
    pub rate_max: f64,
    /// Rate multiplier for minor-road arms of maps with a major road.
    pub minor_rate_scale: f64,
    pub speed_mean: f64,
    pub speed_std: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Relative weights of left, straight and right routes.
    pub turn_weights: [f64; 3],
    /// Minimum free space in front of an entry before inserting.
    pub min_headway: f64,
    /// Traffic-only warm-up before the ego enters (s).
    pub warmup: f64,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        SpawnConfig {
            rate_min: 0.05,
            rate_max: 0.15,
            minor_rate_scale: 0.5,
            speed_mean: 12.0,
            speed_std: 2.0,
            speed_min: 6.0,
            speed_max: 18.0,
            turn_weights: [0.25, 0.5, 0.25],
            min_headway: 20.0,
            warmup: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub map: MapConfig,
    pub dt: f64,
    /// Episode limit in simulated seconds after ego insertion.
    pub timeout: f64,
    pub speed_cap: f64,
    pub vehicle_length: f64,
    /// Accelerations for actions 0..7 (lane changes keep speed).
    pub action_accels: [f64; 7],
    pub ego_initial_speed: f64,
    pub driver: DriverParams,
    pub spawn: SpawnConfig,
    /// Look-ahead window for right-of-way holders (s).
    pub priority_horizon: f64,
    /// A prioritised vehicle this close (s) to the conflict when ego
    /// enters makes the entry a yield violation.
    pub yield_window: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            map: MapConfig::default(),
            dt: 0.1,
            timeout: 60.0,
            speed_cap: 25.0,
            vehicle_length: 4.5,
            action_accels: [-4.5, -2.5, -1.0, 0.0, 1.0, 2.5, 4.5],
            ego_initial_speed: 8.0,
            driver: DriverParams::default(),
            spawn: SpawnConfig::default(),
            priority_horizon: 8.0,
            yield_window: 3.0,
        }
    }
}

impl SimConfig {
    pub fn with_map(map: MapConfig) -> Self {
        SimConfig { map, ..SimConfig::default() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.dt > 0.0 && self.dt <= 0.1) {
            return bad(format!("dt {} must be in (0, 0.1]", self.dt));
        }
        if !(self.timeout > 0.0) || !(self.speed_cap > 0.0) || !(self.vehicle_length > 0.0) {
            return bad("timeout, speed_cap and vehicle_length must be positive".into());
        }
        if self.action_accels.iter().any(|a| !a.is_finite()) {
            return bad("action accelerations must be finite".into());
        }
        let s = &self.spawn;
        if !(0.0 <= s.rate_min && s.rate_min <= s.rate_max && s.rate_max.is_finite()) || !(s.minor_rate_scale >= 0.0) {
            return bad(format!("spawn rates [{}, {}] invalid", s.rate_min, s.rate_max));
        }
        if !(s.speed_min > 0.0 && s.speed_min <= s.speed_max) || s.speed_std < 0.0 {
            return bad("spawn speed range invalid".into());
        }
        if s.turn_weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || s.turn_weights.iter().sum::<f64>() <= 0.0 {
            return bad("turn weights must be non-negative with positive sum".into());
        }
        self.driver.validate()
    }
}
