//! Prioritized experience replay: a sum-tree backed ring buffer with
//! proportional sampling, importance-sampling weights, and a linear beta
//! anneal.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, ActionMask, Observation};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("cannot sample a batch of {batch} from a buffer of size {size}")]
    NotEnoughSamples { batch: usize, size: usize },
    #[error("priority index {index} out of range (size {size})")]
    IndexOutOfRange { index: usize, size: usize },
}

/// One stored interaction. `next_mask` caches the action mask of the
/// successor state so target computation never re-runs the feasibility
/// search; it is meaningless when `done` is set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
    pub next_mask: ActionMask,
}

/// Linear anneal of the importance-sampling exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub start: f64,
    pub end: f64,
    /// Steps over which beta moves from start to end; clamped afterwards.
    pub horizon: usize,
}

impl BetaSchedule {
    pub fn new(start: f64, end: f64, horizon: usize) -> Self {
        BetaSchedule { start, end, horizon }
    }
}

/// Beta at a given training step: linear interpolation clamped at the end
/// of the horizon.
pub fn beta_at(schedule: &BetaSchedule, step: usize) -> f64 {
    if schedule.horizon == 0 || step >= schedule.horizon {
        return schedule.end;
    }
    let t = step as f64 / schedule.horizon as f64;
    schedule.start + (schedule.end - schedule.start) * t
}

/// Buffer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub capacity: usize,
    /// Prioritization exponent; 0 is uniform sampling.
    pub alpha: f64,
    /// Additive constant keeping zero-error transitions sampleable.
    pub epsilon: f64,
    /// Divide weights by the batch maximum so the largest is 1.
    pub normalize_weights: bool,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            capacity: 100_000,
            alpha: 0.6,
            epsilon: 1e-5,
            normalize_weights: true,
        }
    }
}

/// A prioritized batch: cloned transitions, their buffer slots (for the
/// later priority update), and importance-sampling weights.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub transitions: Vec<Transition>,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Binary tree over `capacity` leaves stored in a flat array of
/// `2 * capacity - 1` nodes; internal nodes hold the sum (or max) of their
/// children.
#[derive(Debug, Clone)]
struct SegmentTree {
    nodes: Vec<f64>,
    capacity: usize,
    max_tree: bool,
}

impl SegmentTree {
    fn new(capacity: usize, max_tree: bool) -> Self {
        SegmentTree {
            nodes: vec![0.0; 2 * capacity - 1],
            capacity,
            max_tree,
        }
    }

    fn leaf(&self, index: usize) -> f64 {
        self.nodes[index + self.capacity - 1]
    }

    fn root(&self) -> f64 {
        self.nodes[0]
    }

    fn update(&mut self, index: usize, value: f64) {
        let mut node = index + self.capacity - 1;
        self.nodes[node] = value;
        while node > 0 {
            node = (node - 1) / 2;
            let left = self.nodes[2 * node + 1];
            let right = self.nodes[2 * node + 2];
            self.nodes[node] = if self.max_tree { left.max(right) } else { left + right };
        }
    }

    /// Descend to the leaf where the running prefix sum first exceeds
    /// `mass`. Only meaningful for sum trees.
    fn retrieve(&self, mut mass: f64) -> usize {
        let mut node = 0usize;
        loop {
            let left = 2 * node + 1;
            if left >= self.nodes.len() {
                return node - (self.capacity - 1);
            }
            let right = left + 1;
            if mass <= self.nodes[left] || self.nodes[right] == 0.0 {
                node = left;
            } else {
                mass -= self.nodes[left];
                node = right;
            }
        }
    }
}

/// Sum-tree backed prioritized replay store.
#[derive(Debug, Clone)]
pub struct PriorityBuffer {
    config: ReplayConfig,
    data: Vec<Transition>,
    cursor: usize,
    /// Bumped whenever a slot is (over)written; consumers can use it to
    /// invalidate anything memoized per slot.
    generations: Vec<u64>,
    /// Leaves hold p_i^alpha, so the root is the sampling normalizer.
    sum_tree: SegmentTree,
    /// Leaves hold the raw p_i, so the root is the exact max priority.
    max_tree: SegmentTree,
}

impl PriorityBuffer {
    pub fn new(config: ReplayConfig) -> Self {
        assert!(config.capacity > 0, "capacity must be positive");
        PriorityBuffer {
            data: Vec::with_capacity(config.capacity.min(4096)),
            cursor: 0,
            generations: vec![0; config.capacity],
            sum_tree: SegmentTree::new(config.capacity, false),
            max_tree: SegmentTree::new(config.capacity, true),
            config,
        }
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity
    }

    /// Total of the alpha-scaled priorities (root of the sum tree).
    pub fn priority_total(&self) -> f64 {
        self.sum_tree.root()
    }

    /// Exact maximum raw priority over stored entries; 1 when empty.
    pub fn max_priority(&self) -> f64 {
        if self.data.is_empty() {
            1.0
        } else {
            self.max_tree.root()
        }
    }

    /// Raw priority of one slot.
    pub fn priority(&self, index: usize) -> f64 {
        self.max_tree.leaf(index)
    }

    /// Store a transition at the ring cursor with the current maximum
    /// priority, evicting the oldest entry at capacity.
    pub fn push(&mut self, transition: Transition) {
        debug_assert!(
            transition.reward <= 0.0 || transition.done,
            "positive rewards only occur on terminal transitions"
        );
        let priority = self.max_priority();
        let slot = self.cursor;
        if self.data.len() < self.config.capacity {
            self.data.push(transition);
        } else {
            self.data[slot] = transition;
        }
        self.generations[slot] += 1;
        self.set_priority(slot, priority);
        self.cursor = (self.cursor + 1) % self.config.capacity;
    }

    /// Write generation of a slot (bumped on every overwrite).
    pub fn slot_generation(&self, index: usize) -> u64 {
        self.generations[index]
    }

    /// Transition stored in a slot.
    pub fn transition(&self, index: usize) -> &Transition {
        &self.data[index]
    }

    fn set_priority(&mut self, slot: usize, priority: f64) {
        debug_assert!(priority > 0.0);
        self.sum_tree.update(slot, priority.powf(self.config.alpha));
        self.max_tree.update(slot, priority);
    }

    /// Draw a stratified batch: the priority mass is split into `batch`
    /// equal segments and one index is drawn per segment, preserving the
    /// proportional marginal distribution with lower variance. Weights are
    /// (1/(N P(i)))^beta, optionally normalized by the batch maximum.
    pub fn sample<R: Rng>(
        &self,
        batch: usize,
        beta: f64,
        rng: &mut R,
    ) -> Result<SampledBatch, ReplayError> {
        let size = self.len();
        if batch == 0 || size < batch {
            return Err(ReplayError::NotEnoughSamples { batch, size });
        }
        let total = self.sum_tree.root();
        let segment = total / batch as f64;
        let mut indices = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        let n = size as f64;
        for k in 0..batch {
            let mass = segment * (k as f64 + rng.random::<f64>());
            let index = self.sum_tree.retrieve(mass.min(total));
            debug_assert!(index < size);
            let prob = self.sum_tree.leaf(index) / total;
            indices.push(index);
            weights.push((n * prob).recip().powf(beta));
        }
        if self.config.normalize_weights {
            let max_w = weights.iter().cloned().fold(f64::MIN, f64::max);
            for w in &mut weights {
                *w /= max_w;
            }
        }
        let transitions = indices.iter().map(|&i| self.data[i].clone()).collect();
        Ok(SampledBatch {
            transitions,
            indices,
            weights,
        })
    }

    /// Re-prioritize slots from fresh TD errors: p_i = |delta_i| + epsilon.
    pub fn update_priorities(
        &mut self,
        indices: &[usize],
        td_errors: &[f64],
    ) -> Result<(), ReplayError> {
        debug_assert_eq!(indices.len(), td_errors.len());
        for (&index, &delta) in indices.iter().zip(td_errors) {
            if index >= self.len() {
                return Err(ReplayError::IndexOutOfRange {
                    index,
                    size: self.len(),
                });
            }
            self.set_priority(index, delta.abs() + self.config.epsilon);
        }
        Ok(())
    }

    /// Sampling probability of one slot under the current priorities.
    pub fn sample_probability(&self, index: usize) -> f64 {
        self.sum_tree.leaf(index) / self.sum_tree.root()
    }
}
