use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Momdp, MomdpError, QTableStack, ThresholdMode};
use crate::tlq::{admissible_set, ActionSet};

/// Step-size and exploration schedule for [`tabular_tlq_learning`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSchedule {
    /// Step size for the `n`-th update of a pair is `(1 + n)^-lr_exponent`;
    /// values in `(0.5, 1]` satisfy the usual decay conditions.
    pub lr_exponent: f64,
    /// Probability that a step explores; the exploring level is uniform.
    pub explore: f64,
    /// Probability of jumping to a uniformly random state before a step.
    pub restart: f64,
    pub seed: u64,
}

impl Default for TabularSchedule {
    fn default() -> Self {
        TabularSchedule { lr_exponent: 0.7, explore: 0.5, restart: 0.05, seed: 0 }
    }
}

/// Sample-based thresholded lexicographic Q-learning.
///
/// Every objective is updated on every transition; objective `i` bootstraps
/// from the max over `A_{i-1}(s')` under the current estimates.
pub fn tabular_tlq_learning(
    m: &Momdp,
    slacks: &[f64],
    schedule: &TabularSchedule,
    steps: u64,
) -> Result<QTableStack, MomdpError> {
    m.validate()?;
    let k = m.n_objectives();
    if slacks.len() != k || slacks.iter().any(|s| !(*s <= 0.0)) {
        return Err(MomdpError::InvalidArgument(format!("need {k} slacks <= 0, got {slacks:?}")));
    }
    if steps == 0 {
        return Err(MomdpError::InvalidArgument("steps must be positive".into()));
    }
    if !(schedule.lr_exponent > 0.5 && schedule.lr_exponent <= 1.0) {
        return Err(MomdpError::InvalidArgument(format!("lr_exponent {} outside (0.5, 1]", schedule.lr_exponent)));
    }
    let (ns, na) = (m.n_states(), m.n_actions());
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut tables = QTableStack::zeros(ns, na, slacks.to_vec(), ThresholdMode::Adaptive);
    let mut visits = vec![0u64; ns * na];
    let mut levels = vec![ActionSet::empty(); k + 1];
    let mut state = rng.random_range(0..ns);

    let fold = |tables: &QTableStack, s: usize, levels: &mut [ActionSet]| -> Result<(), MomdpError> {
        levels[0] = ActionSet::full(na);
        for i in 0..k {
            levels[i + 1] = admissible_set(tables.row(i, s), levels[i], slacks[i])?;
        }
        Ok(())
    };

    for _ in 0..steps {
        if rng.random::<f64>() < schedule.restart {
            state = rng.random_range(0..ns);
        }
        fold(&tables, state, &mut levels)?;
        let pool = if rng.random::<f64>() < schedule.explore {
            levels[rng.random_range(0..k)]
        } else {
            levels[k]
        };
        let action = pool.sample(&mut rng).expect("admissible sets are never empty");
        let next = m.sample_next(state, action, &mut rng);

        fold(&tables, next, &mut levels)?;
        let sa = state * na + action;
        visits[sa] += 1;
        let lr = (1.0 + visits[sa] as f64).powf(-schedule.lr_exponent);
        for i in 0..k {
            let row = tables.row(i, next);
            let next_max = levels[i].iter().map(|a| row[a]).fold(f64::NEG_INFINITY, f64::max);
            let target = m.reward(i, state, action) + m.discount(i) * next_max;
            let q = &mut tables.q[i][sa];
            *q += lr * (target - *q);
        }
        state = next;
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::momdp::lexicographic_value_iteration;

    #[test]
    fn single_objective_chain_converges() {
        // 4-state deterministic chain; a0 moves right (reward 1 on reaching
        // the end, which then resets to s0), a1 stays put with reward 0.
        let ns = 4;
        let mut t = vec![0.0; ns * 2 * ns];
        let mut r = vec![0.0; ns * 2];
        for s in 0..ns {
            let right = (s + 1) % ns;
            t[(s * 2) * ns + right] = 1.0;
            t[(s * 2 + 1) * ns + s] = 1.0;
            if s == ns - 1 {
                r[s * 2] = 1.0;
            }
        }
        let m = Momdp::new(ns, 2, t, vec![r], vec![0.9]).unwrap();
        let (exact, _) = lexicographic_value_iteration(&m, &[0.0], 1e-12).unwrap();
        let schedule = TabularSchedule { lr_exponent: 0.6, explore: 0.5, restart: 0.1, seed: 3 };
        let learned = tabular_tlq_learning(&m, &[0.0], &schedule, 400_000).unwrap();
        for (a, b) in learned.q[0].iter().zip(&exact.q[0]) {
            assert!((a - b).abs() < 1e-2, "{:?} vs {:?}", learned.q[0], exact.q[0]);
        }
    }

    #[test]
    fn zero_reward_stays_zero() {
        let m = Momdp::new(2, 3, vec![0.5; 12], vec![vec![0.0; 6]; 2], vec![0.9, 0.8]).unwrap();
        let q = tabular_tlq_learning(&m, &[-0.1, -0.1], &TabularSchedule::default(), 10_000).unwrap();
        assert!(q.q.iter().flatten().all(|x| *x == 0.0));
        let sets = q.admissible_sets().unwrap();
        for level in &sets.levels {
            assert!(level.iter().all(|s| *s == ActionSet::full(3)));
        }
    }

    #[test]
    fn rejects_bad_schedule() {
        let m = Momdp::new(1, 1, vec![1.0], vec![vec![0.0]], vec![0.5]).unwrap();
        assert!(tabular_tlq_learning(&m, &[0.0], &TabularSchedule::default(), 0).is_err());
        let bad = TabularSchedule { lr_exponent: 0.3, ..Default::default() };
        assert!(tabular_tlq_learning(&m, &[0.0], &bad, 10).is_err());
    }
}
