use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::momdp::oracle::{check_guarantee, enumerate_with_table, min_bias_demo, PolicyTable};
use crate::momdp::{lexicographic_value_iteration, AdmissibleSets, BellmanBackup, Momdp, QTableStack, RandomShape};
use crate::tlq::{restricted_argmax, ActionSet};

/// Deliberate defects for checking that the suite notices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Admissible sets built with `max - slack` instead of `max + slack`.
    FlipSlackSign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleCheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub max_states: usize,
    pub max_actions: usize,
    pub max_objectives: usize,
    pub q_tol: f64,
    pub guarantee_eps: f64,
    pub fault: Option<Fault>,
}

impl Default for OracleCheckConfig {
    fn default() -> Self {
        OracleCheckConfig {
            instances: 50,
            seed: 2024,
            max_states: 6,
            max_actions: 3,
            max_objectives: 3,
            q_tol: 1e-6,
            guarantee_eps: 1e-6,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub checked: usize,
    pub failed: usize,
    pub first_failure: Option<String>,
}

impl PropertyResult {
    fn new(name: &'static str) -> Self {
        PropertyResult { name, checked: 0, failed: 0, first_failure: None }
    }

    fn record(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok {
            self.failed += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(detail());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failed == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub properties: Vec<PropertyResult>,
    pub seconds: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(PropertyResult::passed)
    }

    pub fn property(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.name == name)
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.properties {
            let status = if p.passed() { "PASS" } else { "FAIL" };
            write!(f, "{status} {:<34} checked {:>4} failed {:>4}", p.name, p.checked, p.failed)?;
            if let Some(d) = &p.first_failure {
                write!(f, "  first: {d}")?;
            }
            writeln!(f)?;
        }
        write!(f, "{:.2}s", self.seconds)
    }
}

pub const SETS_MATCH: &str = "admissible_sets_match_enumeration";
pub const GUARANTEE: &str = "slack_guarantee";
pub const MIN_BIAS: &str = "rectified_target_biased_low";
pub const NO_MIN: &str = "adaptive_target_has_no_min";

/// Sets with the slack applied on the wrong side of the maximum.
fn flipped_sets(q: &QTableStack) -> AdmissibleSets {
    let mut levels = vec![vec![ActionSet::full(q.n_actions); q.n_states]];
    for i in 0..q.k() {
        let next = (0..q.n_states)
            .map(|s| {
                let row = q.row(i, s);
                let prior = levels[i][s];
                let best = restricted_argmax(row, prior).expect("non-empty");
                prior.iter().filter(|a| *a == best || row[*a] >= row[best] - q.thresholds[i]).collect()
            })
            .collect();
        levels.push(next);
    }
    AdmissibleSets { levels }
}

/// Solver-versus-enumeration checks on random small MOMDPs, the slack
/// guarantee, and the bias of min-rectified targets.
pub fn run_oracle_check(cfg: &OracleCheckConfig) -> Result<OracleReport, HarnessError> {
    if cfg.instances == 0 || cfg.max_states < 1 || cfg.max_actions < 1 || cfg.max_objectives < 1 {
        return Err(HarnessError::Config("oracle check needs at least one instance, state, action and objective".into()));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sets_match = PropertyResult::new(SETS_MATCH);
    let mut guarantee = PropertyResult::new(GUARANTEE);
    for n in 0..cfg.instances {
        let shape = RandomShape {
            n_states: rng.random_range(1..=cfg.max_states),
            n_actions: rng.random_range(1..=cfg.max_actions),
            n_objectives: rng.random_range(1..=cfg.max_objectives),
            max_branching: 3,
            gamma_min: 0.5,
            gamma_max: 0.95,
        };
        let m = Momdp::random(&mut rng, &shape);
        let slacks: Vec<f64> = (0..shape.n_objectives).map(|_| rng.random_range(-0.5..=0.0)).collect();
        let table = PolicyTable::build(&m)?;
        let oracle = enumerate_with_table(&m, &table, &slacks)?;
        let (q, mut sets) = lexicographic_value_iteration(&m, &slacks, 1e-12)?;
        if cfg.fault == Some(Fault::FlipSlackSign) {
            sets = flipped_sets(&q);
        }
        let q_err = q.q.iter().flatten().zip(oracle.q.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        sets_match.record(sets == oracle.sets && q_err <= cfg.q_tol, || {
            format!("instance {n} ({}x{}x{}): sets equal {}, max |dQ| {q_err:.2e}", shape.n_states, shape.n_actions, shape.n_objectives, sets == oracle.sets)
        });
        let g = check_guarantee(&m, &table, &sets, &slacks, cfg.guarantee_eps);
        guarantee.record(g.is_ok(), || {
            let v = g.as_ref().err().expect("failure");
            format!("instance {n}: objective {} state {} value {:.6} < bound {:.6}", v.objective, v.state, v.value, v.bound)
        });
    }

    // X in {-1, 0}, floor -0.2: E[min] = -0.6 against min(E) = -0.5.
    let mut min_bias = PropertyResult::new(MIN_BIAS);
    let report = min_bias_demo(&[(0.5, -1.0), (0.5, 0.0)], -0.2, 20_000, &mut rng);
    min_bias.record(report.z() > 3.0, || format!("gap {:.4} is only {:.2} standard errors", report.gap(), report.z()));

    let mut no_min = PropertyResult::new(NO_MIN);
    let adaptive = BellmanBackup::Restricted;
    let rectified = BellmanBackup::Rectified { floor: 0.0 };
    let ok = !adaptive.clamps() && adaptive.apply(1.0, 0.5, 4.0) == 3.0 && rectified.clamps() && rectified.apply(1.0, 0.5, 4.0) == 0.0;
    no_min.record(ok, || "adaptive backup clamps its target".into());

    Ok(OracleReport { properties: vec![sets_match, guarantee, min_bias, no_min], seconds: started.elapsed().as_secs_f64() })
}
