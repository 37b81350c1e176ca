use nalgebra::{DMatrix, DVector};

use super::{AdmissibleSets, Momdp, MomdpError, QTableStack, ThresholdMode, ValueVector};
use crate::tlq::ActionSet;

/// Sweep cap for every iterative solver in this module.
pub const MAX_SWEEPS: usize = 10_000;

/// One-step backup applied to `r + gamma * next`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BellmanBackup {
    /// Plain backup with the next-state max restricted to the prior
    /// objective's admissible actions. No clamping.
    Restricted,
    /// Backup clamped from above at a static floor.
    Rectified { floor: f64 },
}

impl BellmanBackup {
    #[inline]
    pub fn apply(self, reward: f64, gamma: f64, next: f64) -> f64 {
        let target = reward + gamma * next;
        match self {
            BellmanBackup::Restricted => target,
            BellmanBackup::Rectified { floor } => floor.min(target),
        }
    }

    pub fn clamps(self) -> bool {
        matches!(self, BellmanBackup::Rectified { .. })
    }
}

fn check_tol(tol: f64) -> Result<(), MomdpError> {
    if tol > 0.0 && tol.is_finite() {
        Ok(())
    } else {
        Err(MomdpError::InvalidArgument(format!("tolerance must be positive, got {tol}")))
    }
}

/// Value iteration for objective `level` with the next-state max taken over
/// `prior[s']`.
fn restricted_iteration(
    m: &Momdp,
    level: usize,
    prior: &[ActionSet],
    backup: BellmanBackup,
    tol: f64,
) -> Result<Vec<f64>, MomdpError> {
    let (ns, na) = (m.n_states(), m.n_actions());
    let gamma = m.discount(level);
    let mut q = vec![0.0; ns * na];
    let mut next_q = vec![0.0; ns * na];
    let mut v = vec![0.0; ns];
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        for (s, vs) in v.iter_mut().enumerate() {
            *vs = prior[s].iter().map(|a| q[s * na + a]).fold(f64::NEG_INFINITY, f64::max);
        }
        residual = 0.0;
        for s in 0..ns {
            for a in 0..na {
                let expected: f64 = m.p(s, a).iter().zip(&v).map(|(p, vn)| if *p > 0.0 { p * vn } else { 0.0 }).sum();
                let updated = backup.apply(m.reward(level, s, a), gamma, expected);
                residual = residual.max((updated - q[s * na + a]).abs());
                next_q[s * na + a] = updated;
            }
        }
        std::mem::swap(&mut q, &mut next_q);
        if residual < tol {
            return Ok(q);
        }
    }
    Err(MomdpError::NotConverged { level: level + 1, sweeps: MAX_SWEEPS, residual })
}

fn solve_levels(
    m: &Momdp,
    thresholds: &[f64],
    mode: ThresholdMode,
    tol: f64,
) -> Result<(QTableStack, AdmissibleSets), MomdpError> {
    m.validate()?;
    check_tol(tol)?;
    let k = m.n_objectives();
    if thresholds.len() != k {
        return Err(MomdpError::InvalidArgument(format!("{} thresholds for {k} objectives", thresholds.len())));
    }
    let mut tables = QTableStack::zeros(m.n_states(), m.n_actions(), thresholds.to_vec(), mode);
    let mut levels = vec![vec![ActionSet::full(m.n_actions()); m.n_states()]];
    for (i, &tau) in thresholds.iter().enumerate() {
        let (backup, slack) = match mode {
            ThresholdMode::Adaptive => (BellmanBackup::Restricted, tau),
            ThresholdMode::Static => (BellmanBackup::Rectified { floor: tau }, 0.0),
        };
        tables.q[i] = restricted_iteration(m, i, &levels[i], backup, tol)?;
        let next = (0..m.n_states())
            .map(|s| crate::tlq::admissible_set(tables.row(i, s), levels[i][s], slack))
            .collect::<Result<Vec<_>, _>>()?;
        levels.push(next);
    }
    Ok((tables, AdmissibleSets { levels }))
}

/// Level-by-level fixed point of the restricted Bellman operator with
/// adaptive thresholds: objective `i` is solved with its next-state max
/// restricted to `A_{i-1}`, then `A_i` keeps the actions within `slacks[i]`
/// of the restricted best.
pub fn lexicographic_value_iteration(
    m: &Momdp,
    slacks: &[f64],
    tol: f64,
) -> Result<(QTableStack, AdmissibleSets), MomdpError> {
    if let Some(s) = slacks.iter().find(|s| !(**s <= 0.0)) {
        return Err(MomdpError::InvalidArgument(format!("slacks must be <= 0, got {s}")));
    }
    solve_levels(m, slacks, ThresholdMode::Adaptive, tol)
}

/// Fixed point of the min-rectified operator with static floors. The
/// admissible sets of the result are the restricted argmax sets of the
/// rectified values (see [`QTableStack::admissible_sets`]).
pub fn rectified_value_iteration(m: &Momdp, floors: &[f64], tol: f64) -> Result<QTableStack, MomdpError> {
    if let Some(f) = floors.iter().find(|f| !f.is_finite()) {
        return Err(MomdpError::InvalidArgument(format!("floors must be finite, got {f}")));
    }
    solve_levels(m, floors, ThresholdMode::Static, tol).map(|(q, _)| q)
}

/// Exact evaluation of a deterministic policy for every objective by solving
/// `(I - gamma P_pi) v = r_pi`. The solve is accepted when its residual is
/// below `tol`.
pub fn policy_value(m: &Momdp, policy: &[usize], tol: f64) -> Result<ValueVector, MomdpError> {
    check_tol(tol)?;
    let ns = m.n_states();
    if policy.len() != ns {
        return Err(MomdpError::InvalidArgument(format!("policy covers {} of {ns} states", policy.len())));
    }
    if let Some(a) = policy.iter().find(|a| **a >= m.n_actions()) {
        return Err(MomdpError::InvalidArgument(format!("policy uses action {a} of {}", m.n_actions())));
    }
    let mut values = Vec::with_capacity(m.n_objectives());
    for i in 0..m.n_objectives() {
        let gamma = m.discount(i);
        let system = DMatrix::from_fn(ns, ns, |s, t| {
            let id = if s == t { 1.0 } else { 0.0 };
            id - gamma * m.p(s, policy[s])[t]
        });
        let rhs = DVector::from_fn(ns, |s, _| m.reward(i, s, policy[s]));
        let v = system
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or_else(|| MomdpError::InvalidModel("singular policy-evaluation system".into()))?;
        let residual = (&system * &v - &rhs).amax();
        if residual > tol {
            return Err(MomdpError::NotConverged { level: i + 1, sweeps: 1, residual });
        }
        values.push(v.iter().copied().collect());
    }
    Ok(ValueVector { values })
}
