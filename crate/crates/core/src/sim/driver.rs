use serde::{Deserialize, Serialize};

use super::SimError;

/// Car-following and gap-acceptance parameters of surrounding drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriverParams {
    pub max_accel: f64,
    /// Comfortable deceleration in the car-following law.
    pub comfort_decel: f64,
    /// Hard braking limit.
    pub max_decel: f64,
    pub min_gap: f64,
    pub time_headway: f64,
    pub accel_exponent: f64,
    /// Extra clearance (s) a yielding driver demands before entering.
    pub yield_margin: f64,
    /// Clearance (s) a driver with right of way keeps to committed traffic.
    pub priority_margin: f64,
    /// Deceleration beyond which a driver considers itself unable to stop.
    pub commit_decel: f64,
    /// Distance scanned for leaders and conflicts (m).
    pub lookahead: f64,
}

impl Default for DriverParams {
    fn default() -> Self {
        DriverParams {
            max_accel: 2.0,
            comfort_decel: 2.0,
            max_decel: 8.0,
            min_gap: 2.0,
            time_headway: 1.5,
            accel_exponent: 4.0,
            yield_margin: 1.0,
            priority_margin: 1.0,
            commit_decel: 4.0,
            lookahead: 100.0,
        }
    }
}

impl DriverParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let all = [
            self.max_accel,
            self.comfort_decel,
            self.max_decel,
            self.min_gap,
            self.time_headway,
            self.accel_exponent,
            self.commit_decel,
            self.lookahead,
        ];
        if all.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.yield_margin < 0.0 || self.priority_margin < 0.0 {
            return Err(SimError::Config("driver parameters must be positive".into()));
        }
        Ok(())
    }

    /// Distance needed to stop from `v` at the commit deceleration.
    pub fn stopping_distance(&self, v: f64) -> f64 {
        v * v / (2.0 * self.commit_decel)
    }
}

/// Intelligent-driver-model acceleration towards desired speed `v0`, with
/// an optional leader given as `(bumper gap, leader speed)`.
pub fn idm_accel(p: &DriverParams, v: f64, v0: f64, leader: Option<(f64, f64)>) -> f64 {
    let free = if v0 > 0.0 { 1.0 - (v / v0).powf(p.accel_exponent) } else { -1.0 };
    let interaction = match leader {
        Some((gap, v_lead)) => {
            let dv = v - v_lead;
            let s_star = p.min_gap + (v * p.time_headway + v * dv / (2.0 * (p.max_accel * p.comfort_decel).sqrt())).max(0.0);
            let g = gap.max(1e-3);
            (s_star / g).powi(2)
        }
        None => 0.0,
    };
    (p.max_accel * (free - interaction)).clamp(-p.max_decel, p.max_accel)
}

/// Time to cover `dist` starting at `v`, accelerating at `a` up to `v_max`.
pub fn time_to_cover(dist: f64, v: f64, a: f64, v_max: f64) -> f64 {
    if dist <= 0.0 {
        return 0.0;
    }
    let v_max = v_max.max(v).max(1e-6);
    if a <= 0.0 {
        return if v > 1e-9 { dist / v } else { f64::INFINITY };
    }
    let d_acc = (v_max * v_max - v * v) / (2.0 * a);
    if dist <= d_acc {
        (-v + (v * v + 2.0 * a * dist).sqrt()) / a
    } else {
        (v_max - v) / a + (dist - d_acc) / v_max
    }
}
