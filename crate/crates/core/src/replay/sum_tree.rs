//! Binary sum tree over a power-of-two number of leaves.

use crate::error::{Error, Result};

/// Complete binary tree whose internal nodes hold the sum of their children.
///
/// Node 1 is the root; leaf `i` lives at node `leaves + i`.
#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    /// Creates a tree with at least `min_leaves` leaves, rounded up to a power of two.
    pub fn new(min_leaves: usize) -> Result<Self> {
        if min_leaves == 0 {
            return Err(Error::Config("sum tree capacity must be positive".into()));
        }
        let leaves = min_leaves.next_power_of_two();
        Ok(Self {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        })
    }

    pub fn capacity(&self) -> usize {
        self.leaves
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[self.leaves + leaf]
    }

    /// Sets leaf `leaf` to `priority` and refreshes its ancestors.
    pub fn set(&mut self, leaf: usize, priority: f64) {
        assert!(leaf < self.leaves, "leaf {leaf} out of range");
        assert!(priority >= 0.0 && priority.is_finite(), "invalid priority {priority}");
        let mut node = self.leaves + leaf;
        self.nodes[node] = priority;
        while node > 1 {
            node /= 2;
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
    }

    /// Returns the unique leaf `i` with `cumsum(p[..i]) <= u < cumsum(p[..=i])`.
    pub fn prefix_sample(&self, u: f64) -> Result<usize> {
        let total = self.total();
        if !(total > 0.0) {
            return Err(Error::Input("prefix sample on an empty tree".into()));
        }
        if !(0.0..total).contains(&u) {
            return Err(Error::Input(format!("prefix value {u} outside [0, {total})")));
        }
        Ok(self.descend(u))
    }

    /// Descent that never lands on a zero-priority leaf, even when rounding
    /// pushes `u` past the last positive partial sum.
    pub(crate) fn descend(&self, mut u: f64) -> usize {
        let mut node = 1;
        while node < self.leaves {
            let left = 2 * node;
            let right = left + 1;
            if u < self.nodes[left] || self.nodes[right] <= 0.0 {
                if u >= self.nodes[left] {
                    u = self.nodes[left];
                }
                node = left;
            } else {
                u -= self.nodes[left];
                node = right;
            }
        }
        node - self.leaves
    }

    /// Largest relative deviation between any internal node and the sum of its children.
    pub fn max_relative_inconsistency(&self) -> f64 {
        (1..self.leaves)
            .map(|n| {
                let sum = self.nodes[2 * n] + self.nodes[2 * n + 1];
                let scale = sum.abs().max(self.nodes[n].abs()).max(f64::MIN_POSITIVE);
                (self.nodes[n] - sum).abs() / scale
            })
            .fold(0.0, f64::max)
    }

    /// Sum of all leaves recomputed from scratch.
    pub fn leaf_sum(&self) -> f64 {
        self.nodes[self.leaves..].iter().sum()
    }
}
