//! Finite multi-objective MDPs with exact and sample-based lexicographic
//! solvers, plus the brute-force oracles that check them.

mod learn;
pub mod oracle;
mod solve;

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tlq::{ActionSet, PolicyError};

pub use learn::{tabular_tlq_learning, TabularSchedule};
pub use solve::{
    lexicographic_value_iteration, policy_value, rectified_value_iteration, BellmanBackup,
    MAX_SWEEPS,
};

const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomdpError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("objective {level} did not converge after {sweeps} sweeps (residual {residual:e})")]
    NotConverged { level: usize, sweeps: usize, residual: f64 },
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Finite MDP with `k` reward/discount pairs. Objective 0 has the highest
/// priority.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Momdp {
    n_states: usize,
    n_actions: usize,
    /// `P(s'|s,a)` at `(s * n_actions + a) * n_states + s'`.
    transition: Vec<f64>,
    /// `r_i(s,a)` at `[i][s * n_actions + a]`.
    rewards: Vec<Vec<f64>>,
    discounts: Vec<f64>,
}

impl Momdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        rewards: Vec<Vec<f64>>,
        discounts: Vec<f64>,
    ) -> Result<Self, MomdpError> {
        let m = Momdp { n_states, n_actions, transition, rewards, discounts };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), MomdpError> {
        let bad = |msg: String| Err(MomdpError::InvalidModel(msg));
        if self.n_states == 0 || self.n_actions == 0 {
            return bad("need at least one state and one action".into());
        }
        if self.n_actions > crate::tlq::MAX_ACTIONS {
            return bad(format!("at most {} actions supported", crate::tlq::MAX_ACTIONS));
        }
        if self.discounts.is_empty() {
            return bad("need at least one objective".into());
        }
        if self.rewards.len() != self.discounts.len() {
            return bad(format!("{} reward tables for {} discounts", self.rewards.len(), self.discounts.len()));
        }
        let sa = self.n_states * self.n_actions;
        if self.transition.len() != sa * self.n_states {
            return bad(format!("transition table has {} entries, expected {}", self.transition.len(), sa * self.n_states));
        }
        for (i, g) in self.discounts.iter().enumerate() {
            if !(0.0..1.0).contains(g) {
                return bad(format!("discount {i} = {g} outside [0, 1)"));
            }
        }
        for (i, r) in self.rewards.iter().enumerate() {
            if r.len() != sa {
                return bad(format!("reward table {i} has {} entries, expected {sa}", r.len()));
            }
            if let Some(x) = r.iter().find(|x| !x.is_finite()) {
                return bad(format!("reward table {i} contains {x}"));
            }
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.p(s, a);
                if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return bad(format!("row ({s},{a}) has a negative or non-finite probability"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return bad(format!("row ({s},{a}) sums to {sum}"));
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_objectives(&self) -> usize {
        self.discounts.len()
    }

    pub fn discount(&self, i: usize) -> f64 {
        self.discounts[i]
    }

    pub fn discounts(&self) -> &[f64] {
        &self.discounts
    }

    /// Next-state distribution for `(s, a)`.
    pub fn p(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn reward(&self, i: usize, s: usize, a: usize) -> f64 {
        self.rewards[i][s * self.n_actions + a]
    }

    pub fn reward_table(&self, i: usize) -> &[f64] {
        &self.rewards[i]
    }

    /// Largest `|r_i|`.
    pub fn reward_bound(&self, i: usize) -> f64 {
        self.rewards[i].iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Draw `s' ~ P(.|s,a)` from a uniform variate.
    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let row = self.p(s, a);
        for (next, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return next;
            }
        }
        row.iter().rposition(|p| *p > 0.0).unwrap_or(self.n_states - 1)
    }

    /// Random instance with sparse transition rows and rewards in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, shape: &RandomShape) -> Self {
        let (ns, na, k) = (shape.n_states, shape.n_actions, shape.n_objectives);
        let mut transition = vec![0.0; ns * na * ns];
        for sa in 0..ns * na {
            let support = rng.random_range(1..=shape.max_branching.clamp(1, ns));
            let row = &mut transition[sa * ns..(sa + 1) * ns];
            for _ in 0..support {
                row[rng.random_range(0..ns)] += rng.random_range(0.1..1.0);
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
        }
        let rewards = (0..k)
            .map(|_| (0..ns * na).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let discounts = (0..k).map(|_| rng.random_range(shape.gamma_min..=shape.gamma_max)).collect();
        Momdp { n_states: ns, n_actions: na, transition, rewards, discounts }
    }

    /// Plain-text tabular format:
    ///
    /// ```text
    /// # comments start with '#'
    /// n_states n_actions k
    /// gamma_1 .. gamma_k
    /// P(.|s,a) rows, one per (s, a), row-major over s then a
    /// k reward blocks, each n_states rows of n_actions values
    /// ```
    pub fn parse(text: &str) -> Result<Self, MomdpError> {
        let mut tokens = text.lines().enumerate().flat_map(|(ln, line)| {
            let body = line.split('#').next().unwrap_or("");
            body.split_whitespace().map(move |t| (ln + 1, t.to_string())).collect::<Vec<_>>()
        });
        let mut last_line = 0;
        let mut next_num = |what: &str| -> Result<f64, MomdpError> {
            let (line, tok) = tokens
                .next()
                .ok_or_else(|| MomdpError::Parse { line: last_line, msg: format!("unexpected end of input reading {what}") })?;
            last_line = line;
            tok.parse::<f64>()
                .map_err(|_| MomdpError::Parse { line, msg: format!("bad {what} `{tok}`") })
        };
        let count = |x: f64, what: &str| -> Result<usize, MomdpError> {
            if x >= 1.0 && x.fract() == 0.0 && x < 1e7 {
                Ok(x as usize)
            } else {
                Err(MomdpError::Parse { line: 1, msg: format!("{what} must be a positive integer, got {x}") })
            }
        };
        let ns = count(next_num("n_states")?, "n_states")?;
        let na = count(next_num("n_actions")?, "n_actions")?;
        let k = count(next_num("k")?, "k")?;
        let discounts = (0..k).map(|_| next_num("discount")).collect::<Result<Vec<_>, _>>()?;
        let transition = (0..ns * na * ns).map(|_| next_num("probability")).collect::<Result<Vec<_>, _>>()?;
        let rewards = (0..k)
            .map(|_| (0..ns * na).map(|_| next_num("reward")).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        if let Some((line, tok)) = tokens.next() {
            return Err(MomdpError::Parse { line, msg: format!("trailing token `{tok}`") });
        }
        Momdp::new(ns, na, transition, rewards, discounts)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# n_states n_actions k");
        let _ = writeln!(out, "{} {} {}", self.n_states, self.n_actions, self.n_objectives());
        let _ = writeln!(out, "# discounts");
        let _ = writeln!(out, "{}", join(&self.discounts));
        let _ = writeln!(out, "# transitions P(s'|s,a), one row per (s,a)");
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let _ = writeln!(out, "{}", join(self.p(s, a)));
            }
        }
        for (i, r) in self.rewards.iter().enumerate() {
            let _ = writeln!(out, "# rewards objective {}", i + 1);
            for s in 0..self.n_states {
                let _ = writeln!(out, "{}", join(&r[s * self.n_actions..(s + 1) * self.n_actions]));
            }
        }
        out
    }
}

fn join(xs: &[f64]) -> String {
    // `{:?}` on f64 prints the shortest representation that round-trips.
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

/// Shape parameters for [`Momdp::random`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomShape {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_objectives: usize,
    pub max_branching: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for RandomShape {
    fn default() -> Self {
        RandomShape { n_states: 5, n_actions: 3, n_objectives: 2, max_branching: 3, gamma_min: 0.5, gamma_max: 0.95 }
    }
}

/// How the thresholds of a [`QTableStack`] are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdMode {
    /// `tau_i <= 0` is a slack below the per-state restricted maximum.
    Adaptive,
    /// `tau_i` is an absolute floor the (rectified) values are clamped to.
    Static,
}

/// One Q table per objective plus its threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTableStack {
    pub n_states: usize,
    pub n_actions: usize,
    /// `Q_i(s,a)` at `[i][s * n_actions + a]`.
    pub q: Vec<Vec<f64>>,
    pub thresholds: Vec<f64>,
    pub mode: ThresholdMode,
}

impl QTableStack {
    pub fn zeros(n_states: usize, n_actions: usize, thresholds: Vec<f64>, mode: ThresholdMode) -> Self {
        let q = vec![vec![0.0; n_states * n_actions]; thresholds.len()];
        QTableStack { n_states, n_actions, q, thresholds, mode }
    }

    pub fn k(&self) -> usize {
        self.q.len()
    }

    pub fn row(&self, i: usize, s: usize) -> &[f64] {
        &self.q[i][s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Admissible sets implied by the tables: slack rule in adaptive mode,
    /// plain restricted argmax (ties kept) in static mode.
    pub fn admissible_sets(&self) -> Result<AdmissibleSets, PolicyError> {
        let mut levels = vec![vec![ActionSet::full(self.n_actions); self.n_states]];
        for i in 0..self.k() {
            let slack = match self.mode {
                ThresholdMode::Adaptive => self.thresholds[i],
                ThresholdMode::Static => 0.0,
            };
            let prev = &levels[i];
            let next = (0..self.n_states)
                .map(|s| crate::tlq::admissible_set(self.row(i, s), prev[s], slack))
                .collect::<Result<Vec<_>, _>>()?;
            levels.push(next);
        }
        Ok(AdmissibleSets { levels })
    }
}

/// `A_i(s)` for `i = 0..=k`, with `A_0(s)` the full action space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissibleSets {
    pub levels: Vec<Vec<ActionSet>>,
}

impl AdmissibleSets {
    pub fn k(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn at(&self, level: usize, s: usize) -> ActionSet {
        self.levels[level][s]
    }

    pub fn final_level(&self) -> &[ActionSet] {
        &self.levels[self.k()]
    }

    /// Nested and non-empty at every level.
    pub fn is_well_formed(&self) -> bool {
        self.levels.windows(2).all(|w| {
            w[0].iter().zip(&w[1]).all(|(outer, inner)| !inner.is_empty() && inner.is_subset(*outer))
        })
    }

    /// Deterministic policy taking the lowest-index action of `A_k(s)`.
    pub fn greedy_policy(&self) -> Vec<usize> {
        self.final_level().iter().map(|s| s.first().unwrap_or(0)).collect()
    }
}

/// `v_i^pi(s)` at `[i][s]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueVector {
    pub values: Vec<Vec<f64>>,
}

impl ValueVector {
    pub fn objective(&self, i: usize) -> &[f64] {
        &self.values[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn text_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = Momdp::random(&mut rng, &RandomShape::default());
        let back = Momdp::parse(&m.to_text()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn parse_rejects_bad_rows() {
        let text = "2 1 1\n0.9\n0.5 0.4\n0 1\n0\n0\n";
        assert!(matches!(Momdp::parse(text), Err(MomdpError::InvalidModel(_))));
        let text = "2 1 1\n1.0\n0.5 0.5\n0 1\n0\n0\n";
        assert!(matches!(Momdp::parse(text), Err(MomdpError::InvalidModel(_))));
        let text = "2 1 1\n0.5\n0.5 0.5\n0 1\n0\n";
        assert!(matches!(Momdp::parse(text), Err(MomdpError::Parse { .. })));
        let text = "2 1 1\n0.5\n0.5 0.5\n0 1\n0\n0 7\n";
        assert!(matches!(Momdp::parse(text), Err(MomdpError::Parse { .. })));
    }

    #[test]
    fn parse_accepts_comments() {
        let text = "# tiny\n1 1 1 # header\n0.5\n1.0\n# rewards\n2.0\n";
        let m = Momdp::parse(text).unwrap();
        assert_eq!(m.reward(0, 0, 0), 2.0);
    }

    #[test]
    fn random_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let m = Momdp::random(&mut rng, &RandomShape { n_states: 6, ..Default::default() });
            m.validate().unwrap();
        }
    }
}
