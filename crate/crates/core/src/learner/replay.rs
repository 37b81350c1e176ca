//! Prioritized experience replay over a sum tree.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Binary tree whose internal nodes hold the sum of their children.
#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        SumTree { leaves, nodes: vec![0.0; 2 * leaves] }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        let mut n = self.leaves + i;
        self.nodes[n] = value;
        while n > 1 {
            n /= 2;
            self.nodes[n] = self.nodes[2 * n] + self.nodes[2 * n + 1];
        }
    }

    /// Leaf whose cumulative range contains `mass`, skipping zero leaves.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut n = 1;
        while n < self.leaves {
            let left = self.nodes[2 * n];
            if mass < left || self.nodes[2 * n + 1] <= 0.0 {
                n *= 2;
            } else {
                mass -= left;
                n = 2 * n + 1;
            }
        }
        n - self.leaves
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    pub capacity: usize,
    /// Priority exponent; 0 gives uniform sampling.
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Added to |TD error| so that no priority is zero.
    pub eps: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig { capacity: 100_000, alpha: 0.6, beta_start: 0.4, beta_end: 1.0, eps: 1e-3 }
    }
}

impl ReplayConfig {
    /// Importance exponent after `frac` of training.
    pub fn beta(&self, frac: f64) -> f64 {
        self.beta_start + (self.beta_end - self.beta_start) * frac.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    pub indices: Vec<usize>,
    /// Importance weights, normalized so the largest is 1.
    pub weights: Vec<f64>,
}

/// Ring buffer with proportional prioritized sampling.
#[derive(Debug, Clone)]
pub struct PrioritizedReplay<T> {
    cfg: ReplayConfig,
    items: Vec<T>,
    next: usize,
    tree: SumTree,
    max_priority: f64,
}

impl<T> PrioritizedReplay<T> {
    pub fn new(cfg: ReplayConfig) -> Self {
        assert!(cfg.capacity > 0, "replay capacity must be positive");
        let tree = SumTree::new(cfg.capacity);
        PrioritizedReplay { items: Vec::with_capacity(cfg.capacity.min(1 << 16)), next: 0, tree, max_priority: 1.0, cfg }
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &T {
        &self.items[i]
    }

    /// Stored priority `p^alpha` of slot `i`.
    pub fn priority(&self, i: usize) -> f64 {
        self.tree.get(i)
    }

    pub fn total_priority(&self) -> f64 {
        self.tree.total()
    }

    /// Stores `item` at the highest priority seen so far, overwriting the
    /// oldest entry when full. Returns the slot.
    pub fn push(&mut self, item: T) -> usize {
        let slot = self.next;
        if self.items.len() < self.cfg.capacity {
            self.items.push(item);
        } else {
            self.items[slot] = item;
        }
        self.tree.set(slot, self.max_priority.powf(self.cfg.alpha));
        self.next = (self.next + 1) % self.cfg.capacity;
        slot
    }

    /// Stratified proportional sample of `n` slots.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, beta: f64, rng: &mut R) -> SampledBatch {
        assert!(!self.items.is_empty(), "sampling from an empty buffer");
        let total = self.tree.total();
        let len = self.items.len() as f64;
        let seg = total / n as f64;
        let mut indices = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for k in 0..n {
            let mass = (k as f64 + rng.random::<f64>()) * seg;
            let i = self.tree.find(mass.min(total * (1.0 - 1e-12))).min(self.items.len() - 1);
            let p = self.tree.get(i) / total;
            indices.push(i);
            weights.push((len * p).powf(-beta));
        }
        let max = weights.iter().cloned().fold(0.0, f64::max);
        for w in &mut weights {
            *w /= max;
        }
        SampledBatch { indices, weights }
    }

    /// Sets the priority of slot `i` from its absolute TD error.
    pub fn update(&mut self, i: usize, td_error: f64) {
        let p = td_error.abs() + self.cfg.eps;
        if p.is_finite() {
            self.max_priority = self.max_priority.max(p);
            self.tree.set(i, p.powf(self.cfg.alpha));
        }
    }
}
