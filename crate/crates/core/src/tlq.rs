//! Thresholded lexicographic action selection.
//!
//! An [`ObjectiveStack`] is an ordered list of objectives. Each objective
//! narrows the set of actions left over by the objectives ranked above it;
//! q-based objectives keep every action whose value is within `slack` of the
//! best remaining action (the best action always survives), rule-based
//! objectives apply an arbitrary mask. Tabular solvers, the deep learner and
//! the driving agent all go through the same [`admissible_set`] rule.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on the action-space size supported by [`ActionSet`].
pub const MAX_ACTIONS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("admissible set requested over an empty prior set")]
    EmptyPrior,
    #[error("slack must be <= 0, got {0}")]
    PositiveSlack(f64),
    #[error("non-finite q value {value} for action {action}")]
    NonFinite { action: usize, value: f64 },
    #[error("q vector has {got} entries, expected at least {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("objective `{0}` returned an empty or out-of-prior action set")]
    BadAgentSet(String),
    #[error("objective level {level} out of range 1..={k}")]
    LevelOutOfRange { level: usize, k: usize },
    #[error("objective stack is empty")]
    EmptyStack,
}

/// A subset of `{0, .., n-1}` stored as a bit mask.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ActionSet(u64);

impl ActionSet {
    pub const fn empty() -> Self {
        ActionSet(0)
    }

    pub fn full(n: usize) -> Self {
        assert!(n <= MAX_ACTIONS, "at most {MAX_ACTIONS} actions supported");
        if n == MAX_ACTIONS {
            ActionSet(u64::MAX)
        } else {
            ActionSet((1u64 << n) - 1)
        }
    }

    pub fn singleton(a: usize) -> Self {
        assert!(a < MAX_ACTIONS);
        ActionSet(1u64 << a)
    }

    pub fn from_actions<I: IntoIterator<Item = usize>>(actions: I) -> Self {
        let mut s = ActionSet::empty();
        for a in actions {
            s.insert(a);
        }
        s
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn contains(self, a: usize) -> bool {
        a < MAX_ACTIONS && self.0 & (1u64 << a) != 0
    }

    pub fn insert(&mut self, a: usize) {
        assert!(a < MAX_ACTIONS);
        self.0 |= 1u64 << a;
    }

    pub fn remove(&mut self, a: usize) {
        if a < MAX_ACTIONS {
            self.0 &= !(1u64 << a);
        }
    }

    pub fn without(mut self, a: usize) -> Self {
        self.remove(a);
        self
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: ActionSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn intersection(self, other: ActionSet) -> Self {
        ActionSet(self.0 & other.0)
    }

    pub fn union(self, other: ActionSet) -> Self {
        ActionSet(self.0 | other.0)
    }

    /// Lowest action index in the set.
    pub fn first(self) -> Option<usize> {
        (self.0 != 0).then(|| self.0.trailing_zeros() as usize)
    }

    /// The `k`-th smallest member.
    pub fn nth(self, k: usize) -> Option<usize> {
        self.iter().nth(k)
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let a = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(a)
            }
        })
    }

    /// Uniform draw from the set.
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> Option<usize> {
        match self.len() {
            0 => None,
            n => self.nth(rng.random_range(0..n)),
        }
    }
}

impl fmt::Debug for ActionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl FromIterator<usize> for ActionSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        ActionSet::from_actions(iter)
    }
}

/// Argmax of `q` over `prior`, lowest index on ties.
pub fn restricted_argmax(q: &[f64], prior: ActionSet) -> Option<usize> {
    let mut best: Option<usize> = None;
    for a in prior.iter() {
        match best {
            Some(b) if q[a] <= q[b] => {}
            _ => best = Some(a),
        }
    }
    best
}

/// `{a in prior | q[a] >= max_{prior} q + slack}`, always containing the argmax.
pub fn admissible_set(q: &[f64], prior: ActionSet, slack: f64) -> Result<ActionSet, PolicyError> {
    if prior.is_empty() {
        return Err(PolicyError::EmptyPrior);
    }
    if !(slack <= 0.0) {
        return Err(PolicyError::PositiveSlack(slack));
    }
    let top = prior.iter().last().unwrap_or(0);
    if q.len() <= top {
        return Err(PolicyError::WidthMismatch { expected: top + 1, got: q.len() });
    }
    for a in prior.iter() {
        if !q[a].is_finite() {
            return Err(PolicyError::NonFinite { action: a, value: q[a] });
        }
    }
    let best = restricted_argmax(q, prior).ok_or(PolicyError::EmptyPrior)?;
    let threshold = q[best] + slack;
    let mut out = ActionSet::singleton(best);
    for a in prior.iter() {
        if q[a] >= threshold {
            out.insert(a);
        }
    }
    Ok(out)
}

/// One entry of an [`ObjectiveStack`].
pub trait ObjectiveAgent<S: ?Sized>: Send + Sync {
    fn name(&self) -> &str;

    /// Actions this objective accepts out of `prior`.
    fn admissible(&self, state: &S, prior: ActionSet) -> Result<ActionSet, PolicyError>;

    /// Per-action values, for q-based objectives.
    fn q_values(&self, _state: &S) -> Option<Vec<f64>> {
        None
    }

    /// Slack `tau <= 0`, for q-based objectives.
    fn slack(&self) -> Option<f64> {
        None
    }
}

/// Q-based objective backed by any `state -> q` function.
pub struct QAgent<F> {
    name: String,
    slack: f64,
    q: F,
}

impl<F> QAgent<F> {
    pub fn new(name: impl Into<String>, slack: f64, q: F) -> Self {
        QAgent { name: name.into(), slack, q }
    }
}

impl<S: ?Sized, F> ObjectiveAgent<S> for QAgent<F>
where
    F: Fn(&S) -> Vec<f64> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn admissible(&self, state: &S, prior: ActionSet) -> Result<ActionSet, PolicyError> {
        admissible_set(&(self.q)(state), prior, self.slack)
    }

    fn q_values(&self, state: &S) -> Option<Vec<f64>> {
        Some((self.q)(state))
    }

    fn slack(&self) -> Option<f64> {
        Some(self.slack)
    }
}

/// Rule-based objective backed by a mask function `(state, prior) -> subset`.
pub struct RuleAgent<F> {
    name: String,
    rule: F,
}

impl<F> RuleAgent<F> {
    pub fn new(name: impl Into<String>, rule: F) -> Self {
        RuleAgent { name: name.into(), rule }
    }
}

impl<S: ?Sized, F> ObjectiveAgent<S> for RuleAgent<F>
where
    F: Fn(&S, ActionSet) -> ActionSet + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn admissible(&self, state: &S, prior: ActionSet) -> Result<ActionSet, PolicyError> {
        if prior.is_empty() {
            return Err(PolicyError::EmptyPrior);
        }
        Ok((self.rule)(state, prior))
    }
}

/// How the final action is drawn from `A_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Uniform draw.
    #[default]
    Random,
    /// Lowest action index.
    Deterministic,
}

/// Ordered objectives, highest priority first.
pub struct ObjectiveStack<S: ?Sized> {
    n_actions: usize,
    agents: Vec<Box<dyn ObjectiveAgent<S>>>,
}

impl<S: ?Sized> ObjectiveStack<S> {
    pub fn new(n_actions: usize) -> Self {
        assert!(n_actions >= 1 && n_actions <= MAX_ACTIONS);
        ObjectiveStack { n_actions, agents: Vec::new() }
    }

    pub fn push(&mut self, agent: Box<dyn ObjectiveAgent<S>>) -> &mut Self {
        self.agents.push(agent);
        self
    }

    pub fn with(mut self, agent: impl ObjectiveAgent<S> + 'static) -> Self {
        self.agents.push(Box::new(agent));
        self
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn agent(&self, level: usize) -> Option<&dyn ObjectiveAgent<S>> {
        level.checked_sub(1).and_then(|i| self.agents.get(i)).map(|b| b.as_ref())
    }

    fn narrow(&self, idx: usize, state: &S, prior: ActionSet) -> Result<ActionSet, PolicyError> {
        let agent = &self.agents[idx];
        let set = agent.admissible(state, prior)?;
        if set.is_empty() || !set.is_subset(prior) {
            return Err(PolicyError::BadAgentSet(agent.name().to_string()));
        }
        Ok(set)
    }

    /// `[A_0, A_1, .., A_upto]`.
    pub fn fold_levels(&self, state: &S, upto: usize) -> Result<Vec<ActionSet>, PolicyError> {
        let upto = upto.min(self.agents.len());
        let mut sets = Vec::with_capacity(upto + 1);
        let mut current = ActionSet::full(self.n_actions);
        sets.push(current);
        for idx in 0..upto {
            current = self.narrow(idx, state, current)?;
            sets.push(current);
        }
        Ok(sets)
    }

    /// `A_{level-1}(state)`: the set objective `level` maximizes over.
    pub fn restricted_argmax_set(&self, state: &S, level: usize) -> Result<ActionSet, PolicyError> {
        let k = self.agents.len();
        if level == 0 || level > k + 1 {
            return Err(PolicyError::LevelOutOfRange { level, k });
        }
        let mut current = ActionSet::full(self.n_actions);
        for idx in 0..level - 1 {
            current = self.narrow(idx, state, current)?;
        }
        Ok(current)
    }

    /// Action selection: narrow level by level; when `explore` names level
    /// `i`, return a uniform draw from `A_{i-1}` instead of continuing.
    pub fn select_action<R: Rng + ?Sized>(
        &self,
        state: &S,
        explore: Option<usize>,
        mode: SelectionMode,
        rng: &mut R,
    ) -> Result<usize, PolicyError> {
        let k = self.agents.len();
        if k == 0 {
            return Err(PolicyError::EmptyStack);
        }
        if let Some(level) = explore {
            if level == 0 || level > k {
                return Err(PolicyError::LevelOutOfRange { level, k });
            }
        }
        let mut current = ActionSet::full(self.n_actions);
        for idx in 0..k {
            if explore == Some(idx + 1) {
                return current.sample(rng).ok_or(PolicyError::EmptyPrior);
            }
            current = self.narrow(idx, state, current)?;
        }
        let pick = match mode {
            SelectionMode::Random => current.sample(rng),
            SelectionMode::Deterministic => current.first(),
        };
        pick.ok_or(PolicyError::EmptyPrior)
    }
}

/// Per-step choice of which objective level (if any) explores.
///
/// The total exploration probability is annealed linearly from `start` to
/// `end` over `anneal_steps`; given that a step explores, the level is drawn
/// from `level_weights` (index 0 is level 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
    pub level_weights: Vec<f64>,
}

impl ExplorationSchedule {
    pub fn none(k: usize) -> Self {
        ExplorationSchedule { start: 0.0, end: 0.0, anneal_steps: 1, level_weights: vec![1.0; k] }
    }

    pub fn probability(&self, step: u64) -> f64 {
        let frac = if self.anneal_steps == 0 {
            1.0
        } else {
            (step as f64 / self.anneal_steps as f64).min(1.0)
        };
        self.start + (self.end - self.start) * frac
    }

    /// `Some(level)` (1-based) when this step explores.
    pub fn draw<R: Rng + ?Sized>(&self, step: u64, rng: &mut R) -> Option<usize> {
        let p = self.probability(step);
        let total: f64 = self.level_weights.iter().sum();
        if p <= 0.0 || total <= 0.0 || rng.random::<f64>() >= p {
            return None;
        }
        let mut u = rng.random::<f64>() * total;
        for (i, w) in self.level_weights.iter().enumerate() {
            if u < *w {
                return Some(i + 1);
            }
            u -= w;
        }
        self.level_weights.iter().rposition(|w| *w > 0.0).map(|i| i + 1)
    }
}
