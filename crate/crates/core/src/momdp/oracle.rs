//! Brute-force references for the lexicographic solvers.
//!
//! [`enumerate_lexicographic`] evaluates every deterministic policy exactly
//! and builds the admissible sets straight from their definition: `Q_i*` is
//! the best return reachable with policies admissible for objectives
//! `1..i-1`, and `A_i(s)` keeps the actions within the slack of the best
//! `Q_i*` over `A_{i-1}(s)`. It shares no code with value iteration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{policy_value, AdmissibleSets, Momdp, MomdpError, QTableStack, RandomShape, ThresholdMode};
use crate::tlq::{restricted_argmax, ActionSet};

/// Enumeration is refused above this many deterministic policies.
pub const MAX_ENUMERATED_POLICIES: usize = 100_000;

const EVAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct OracleSolution {
    /// `Q_i*(s,a)` at `[i][s * n_actions + a]`.
    pub q: Vec<Vec<f64>>,
    /// `max_{pi in Pi_{i-1}} v_i^pi(s)` at `[i][s]`.
    pub best_values: Vec<Vec<f64>>,
    pub sets: AdmissibleSets,
}

/// All `|A|^|S|` deterministic policies with their value vectors.
pub struct PolicyTable {
    pub policies: Vec<Vec<usize>>,
    /// `v_i^pi(s)` at `[policy][i][s]`.
    pub values: Vec<Vec<Vec<f64>>>,
}

impl PolicyTable {
    pub fn build(m: &Momdp) -> Result<Self, MomdpError> {
        let (ns, na) = (m.n_states(), m.n_actions());
        let count = (na as f64).powi(ns as i32);
        if count > MAX_ENUMERATED_POLICIES as f64 {
            return Err(MomdpError::InvalidArgument(format!("{count} policies exceed enumeration limit")));
        }
        let count = count as usize;
        let mut policies = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count);
        for idx in 0..count {
            let mut rest = idx;
            let policy: Vec<usize> = (0..ns)
                .map(|_| {
                    let a = rest % na;
                    rest /= na;
                    a
                })
                .collect();
            values.push(policy_value(m, &policy, EVAL_TOL)?.values);
            policies.push(policy);
        }
        Ok(PolicyTable { policies, values })
    }

    fn allowed(&self, p: usize, sets: &[ActionSet]) -> bool {
        self.policies[p].iter().zip(sets).all(|(a, set)| set.contains(*a))
    }
}

pub fn enumerate_lexicographic(m: &Momdp, slacks: &[f64]) -> Result<OracleSolution, MomdpError> {
    let table = PolicyTable::build(m)?;
    enumerate_with_table(m, &table, slacks)
}

pub fn enumerate_with_table(m: &Momdp, table: &PolicyTable, slacks: &[f64]) -> Result<OracleSolution, MomdpError> {
    let (ns, na, k) = (m.n_states(), m.n_actions(), m.n_objectives());
    if slacks.len() != k {
        return Err(MomdpError::InvalidArgument(format!("{} slacks for {k} objectives", slacks.len())));
    }
    let mut levels: Vec<Vec<ActionSet>> = vec![vec![ActionSet::full(na); ns]];
    let mut q_all = Vec::with_capacity(k);
    let mut best_all = Vec::with_capacity(k);
    for i in 0..k {
        let prev = &levels[i];
        let mut best = vec![f64::NEG_INFINITY; ns];
        for p in 0..table.policies.len() {
            if table.allowed(p, prev) {
                for s in 0..ns {
                    best[s] = best[s].max(table.values[p][i][s]);
                }
            }
        }
        let mut q = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let expected: f64 = m.p(s, a).iter().zip(&best).map(|(p, v)| p * v).sum();
                q[s * na + a] = m.reward(i, s, a) + m.discount(i) * expected;
            }
        }
        let mut next = Vec::with_capacity(ns);
        for s in 0..ns {
            // Direct reading of the definition: the argmax (lowest index on
            // ties) plus everything at or above `max + slack`.
            let mut argmax = None;
            let mut top = f64::NEG_INFINITY;
            for a in prev[s].iter() {
                if q[s * na + a] > top {
                    top = q[s * na + a];
                    argmax = Some(a);
                }
            }
            let mut set = ActionSet::empty();
            for a in prev[s].iter() {
                if Some(a) == argmax || q[s * na + a] >= top + slacks[i] {
                    set.insert(a);
                }
            }
            next.push(set);
        }
        levels.push(next);
        q_all.push(q);
        best_all.push(best);
    }
    Ok(OracleSolution { q: q_all, best_values: best_all, sets: AdmissibleSets { levels } })
}

/// A violated instance of the slack guarantee.
#[derive(Debug, Clone, PartialEq)]
pub struct GuaranteeViolation {
    pub policy: Vec<usize>,
    pub objective: usize,
    pub state: usize,
    pub value: f64,
    pub bound: f64,
}

/// Checks that every policy drawing from `A_k` satisfies, for every
/// objective `i` and state `s`,
/// `v_i(s) >= max_{Pi_{i-1}} v_i(s) + tau_i / (1 - gamma_i) - eps`.
pub fn check_guarantee(
    m: &Momdp,
    table: &PolicyTable,
    sets: &AdmissibleSets,
    slacks: &[f64],
    eps: f64,
) -> Result<usize, GuaranteeViolation> {
    let (ns, k) = (m.n_states(), m.n_objectives());
    let mut best = vec![vec![f64::NEG_INFINITY; ns]; k];
    for i in 0..k {
        for p in 0..table.policies.len() {
            if table.allowed(p, &sets.levels[i]) {
                for s in 0..ns {
                    best[i][s] = best[i][s].max(table.values[p][i][s]);
                }
            }
        }
    }
    let mut checked = 0;
    for p in 0..table.policies.len() {
        if !table.allowed(p, sets.final_level()) {
            continue;
        }
        checked += 1;
        for i in 0..k {
            let margin = slacks[i] / (1.0 - m.discount(i));
            for s in 0..ns {
                let value = table.values[p][i][s];
                let bound = best[i][s] + margin - eps;
                if value < bound {
                    return Err(GuaranteeViolation { policy: table.policies[p].clone(), objective: i + 1, state: s, value, bound });
                }
            }
        }
    }
    Ok(checked)
}

/// Outcome of [`min_bias_demo`].
#[derive(Debug, Clone, PartialEq)]
pub struct MinBiasReport {
    /// Sample mean of `min(tau, X)`.
    pub mean_of_min: f64,
    /// `min(tau, sample mean of X)`.
    pub min_of_mean: f64,
    /// Standard error of `mean_of_min`.
    pub std_err: f64,
    pub samples: usize,
}

impl MinBiasReport {
    pub fn gap(&self) -> f64 {
        self.min_of_mean - self.mean_of_min
    }

    /// Gap measured in standard errors.
    pub fn z(&self) -> f64 {
        if self.std_err > 0.0 {
            self.gap() / self.std_err
        } else if self.gap() > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }
}

/// Monte-Carlo comparison of `E[min(tau, X)]` against `min(tau, E[X])` for a
/// discrete `X` given as `(probability, value)` outcomes: the estimator a
/// sampled rectified target computes versus the quantity it stands for.
pub fn min_bias_demo<R: Rng + ?Sized>(outcomes: &[(f64, f64)], tau: f64, samples: usize, rng: &mut R) -> MinBiasReport {
    let total: f64 = outcomes.iter().map(|(p, _)| p).sum();
    let draw = |rng: &mut R| {
        let mut u = rng.random::<f64>() * total;
        for (p, x) in outcomes {
            if u < *p {
                return *x;
            }
            u -= p;
        }
        outcomes.last().map(|(_, x)| *x).unwrap_or(0.0)
    };
    let (mut sum_x, mut sum_min, mut sum_min_sq) = (0.0, 0.0, 0.0);
    for _ in 0..samples {
        let x = draw(rng);
        let clipped = tau.min(x);
        sum_x += x;
        sum_min += clipped;
        sum_min_sq += clipped * clipped;
    }
    let n = samples.max(1) as f64;
    let mean_of_min = sum_min / n;
    let var = (sum_min_sq / n - mean_of_min * mean_of_min).max(0.0);
    MinBiasReport { mean_of_min, min_of_mean: tau.min(sum_x / n), std_err: (var / n).sqrt(), samples }
}

/// Deterministic 2-state, 2-action, 2-objective instance: `a0` stays,
/// `a1` switches state.
pub fn two_state_example() -> Momdp {
    let t = vec![
        1.0, 0.0, // s0 a0
        0.0, 1.0, // s0 a1
        0.0, 1.0, // s1 a0
        1.0, 0.0, // s1 a1
    ];
    let r1 = vec![1.0, 0.9, 0.0, 1.0];
    let r2 = vec![0.0, 1.0, 1.0, 0.0];
    Momdp::new(2, 2, t, vec![r1, r2], vec![0.9, 0.9]).expect("valid example")
}

/// Slacks used with [`two_state_example`].
pub const TWO_STATE_SLACKS: [f64; 2] = [-0.5, 0.0];

/// Smallest distance between any non-best action value in `A_{i-1}(s)` and
/// its admissibility threshold `max + slack`, over all levels and states.
/// Learned sets match `sets` once every estimate is within half of this.
pub fn threshold_margin(q: &QTableStack, sets: &AdmissibleSets) -> f64 {
    let mut margin = f64::INFINITY;
    for i in 0..q.k() {
        let slack = match q.mode {
            ThresholdMode::Adaptive => q.thresholds[i],
            ThresholdMode::Static => 0.0,
        };
        for s in 0..q.n_states {
            let row = q.row(i, s);
            let prior = sets.at(i, s);
            let Some(best) = restricted_argmax(row, prior) else { continue };
            let threshold = row[best] + slack;
            for a in prior.iter().filter(|a| *a != best) {
                margin = margin.min((row[a] - threshold).abs());
            }
        }
    }
    margin
}

/// Fixed 2-objective benchmark: 20 states, 3 actions, discounts in
/// `[0.5, 0.8]`. The seed was picked so that every action value sits at
/// least 0.05 away from its admissibility threshold.
pub fn benchmark_momdp() -> Momdp {
    let shape = RandomShape { n_states: 20, n_actions: 3, n_objectives: 2, max_branching: 3, gamma_min: 0.5, gamma_max: 0.8 };
    Momdp::random(&mut ChaCha8Rng::seed_from_u64(BENCHMARK_SEED), &shape)
}

const BENCHMARK_SEED: u64 = 482;

/// Slacks used with [`benchmark_momdp`].
pub const BENCHMARK_SLACKS: [f64; 2] = [-0.3, 0.0];
