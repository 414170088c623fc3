//! Prioritized n-step experience replay.
//!
//! Entries are assembled per environment by [`NStepAssembler`], stored in a
//! fixed-capacity ring, and sampled proportionally to their priority through a
//! [`SumTree`]. Importance-sampling weights follow `(N·P(i))^{-β}` normalized
//! by the batch maximum, with `β` annealed linearly to 1.
//!
//! The buffer itself is single-threaded and deterministic; callers that share
//! it between a collector and a learner wrap it in a mutex.

mod nstep;
mod sum_tree;

pub use nstep::{NStepAssembler, NStepEntry, Transition};
pub use sum_tree::SumTree;

use rand::Rng;

use crate::error::{Error, Result};

/// Replay hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayConfig {
    /// Number of n-step entries kept before the oldest is overwritten.
    pub capacity: usize,
    pub n: usize,
    pub gamma: f64,
    /// ω: priorities are `(|δ| + ε_p)^ω`.
    pub priority_exponent: f64,
    /// ε_p.
    pub priority_floor: f64,
    pub beta0: f64,
    /// Frames over which β reaches 1.
    pub beta_anneal_frames: u64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 1 << 20,
            n: 3,
            gamma: 0.99,
            priority_exponent: 0.5,
            priority_floor: 1e-6,
            beta0: 0.45,
            beta_anneal_frames: 10_000_000,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.capacity == 0 {
            return bad("replay capacity must be positive");
        }
        if self.n == 0 {
            return bad("n-step length must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.priority_exponent) {
            return bad("priority exponent must lie in [0, 1]");
        }
        if !(self.priority_floor > 0.0) {
            return bad("priority floor must be positive");
        }
        if !(self.beta0 > 0.0 && self.beta0 <= 1.0) {
            return bad("beta0 must lie in (0, 1]");
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in [0, 1]");
        }
        Ok(())
    }

    /// Linear anneal from β₀ to 1 over `beta_anneal_frames`, clamped at 1.
    pub fn beta_at(&self, frame: u64) -> f64 {
        if self.beta_anneal_frames == 0 {
            return 1.0;
        }
        let progress = frame as f64 / self.beta_anneal_frames as f64;
        (self.beta0 + (1.0 - self.beta0) * progress).min(1.0)
    }
}

/// Handle to a sampled slot; goes stale once the ring overwrites the slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleIndex {
    pub slot: usize,
    pub(crate) stamp: u64,
}

/// A prioritized minibatch.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub indices: Vec<SampleIndex>,
    pub entries: Vec<NStepEntry>,
    /// Importance-sampling weights in `(0, 1]`, maximum exactly 1.
    pub weights: Vec<f64>,
    pub beta: f64,
}

#[derive(Debug, Clone)]
struct Slot {
    entry: NStepEntry,
    pub(crate) stamp: u64,
}

/// Proportional prioritized replay over n-step entries.
#[derive(Debug, Clone)]
pub struct PrioritizedReplay {
    config: ReplayConfig,
    assembler: NStepAssembler,
    tree: SumTree,
    slots: Vec<Option<Slot>>,
    cursor: usize,
    size: usize,
    inserted: u64,
    max_priority: f64,
    stale_updates: u64,
}

impl PrioritizedReplay {
    pub fn new(config: ReplayConfig, num_envs: usize) -> Result<Self> {
        config.validate()?;
        let assembler = NStepAssembler::new(config.n, config.gamma, num_envs)?;
        let tree = SumTree::new(config.capacity)?;
        Ok(Self {
            slots: vec![None; config.capacity],
            config,
            assembler,
            tree,
            cursor: 0,
            size: 0,
            inserted: 0,
            max_priority: 1.0,
            stale_updates: 0,
        })
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    /// Live entries.
    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity
    }

    pub fn total_priority(&self) -> f64 {
        self.tree.total()
    }

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    /// Priority updates dropped because their slot had been overwritten.
    pub fn stale_updates(&self) -> u64 {
        self.stale_updates
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    /// Entries inserted since creation (including overwritten ones).
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn beta_at(&self, frame: u64) -> f64 {
        self.config.beta_at(frame)
    }

    /// Feeds one transition through n-step assembly and stores every entry it
    /// completes at the current maximum priority. Returns the stored entries.
    pub fn push(&mut self, t: Transition) -> Result<Vec<NStepEntry>> {
        let emitted = self.assembler.push(t)?;
        for e in &emitted {
            self.insert(e.clone());
        }
        Ok(emitted)
    }

    /// Stores an already-assembled entry at the current maximum priority.
    pub fn insert(&mut self, entry: NStepEntry) -> SampleIndex {
        let slot = self.cursor;
        let stamp = self.inserted;
        self.slots[slot] = Some(Slot { entry, stamp });
        self.tree.set(slot, self.max_priority);
        self.cursor = (self.cursor + 1) % self.config.capacity;
        self.size = (self.size + 1).min(self.config.capacity);
        self.inserted += 1;
        SampleIndex { slot, stamp }
    }

    pub fn entry(&self, index: SampleIndex) -> Option<&NStepEntry> {
        match &self.slots[index.slot] {
            Some(s) if s.stamp == index.stamp => Some(&s.entry),
            _ => None,
        }
    }

    /// Entries currently stored, oldest first.
    pub fn live_entries(&self) -> impl Iterator<Item = &NStepEntry> {
        let start = if self.size < self.config.capacity { 0 } else { self.cursor };
        (0..self.size).filter_map(move |i| {
            self.slots[(start + i) % self.config.capacity]
                .as_ref()
                .map(|s| &s.entry)
        })
    }

    pub fn priority(&self, slot: usize) -> f64 {
        self.tree.get(slot)
    }

    /// Stratified proportional sample of `batch` entries at training frame `frame`.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, frame: u64, rng: &mut R) -> Result<SampledBatch> {
        if batch == 0 {
            return Err(Error::Input("batch size must be positive".into()));
        }
        if self.size < batch {
            return Err(Error::NotReady {
                size: self.size,
                requested: batch,
            });
        }
        let total = self.tree.total();
        let segment = total / batch as f64;
        let beta = self.beta_at(frame);

        let mut indices = Vec::with_capacity(batch);
        let mut entries = Vec::with_capacity(batch);
        let mut probs = Vec::with_capacity(batch);
        for i in 0..batch {
            let u = ((i as f64 + rng.random::<f64>()) * segment).min(prev_float(total));
            let slot = self.tree.descend(u);
            let s = self.slots[slot]
                .as_ref()
                .expect("positive priority on an empty slot");
            indices.push(SampleIndex {
                slot,
                stamp: s.stamp,
            });
            entries.push(s.entry.clone());
            probs.push(self.tree.get(slot) / total);
        }
        let weights = importance_weights(&probs, self.size, beta);
        Ok(SampledBatch {
            indices,
            entries,
            weights,
            beta,
        })
    }

    /// One non-stratified proportional draw; returns the slot.
    pub fn draw_slot<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        let total = self.tree.total();
        if self.size == 0 || !(total > 0.0) {
            return Err(Error::NotReady {
                size: self.size,
                requested: 1,
            });
        }
        let u = (rng.random::<f64>() * total).min(prev_float(total));
        Ok(self.tree.descend(u))
    }

    /// Sets `p_i ← (|δ_i| + ε_p)^ω` for every still-live index.
    pub fn update_priorities(&mut self, indices: &[SampleIndex], td_abs: &[f64]) -> Result<()> {
        if indices.len() != td_abs.len() {
            return Err(Error::Input(format!(
                "{} indices but {} TD errors",
                indices.len(),
                td_abs.len()
            )));
        }
        for (idx, &delta) in indices.iter().zip(td_abs) {
            if !delta.is_finite() {
                return Err(Error::NonFinite(format!("TD error {delta} for slot {}", idx.slot)));
            }
            if self.entry(*idx).is_none() {
                self.stale_updates += 1;
                continue;
            }
            let p = (delta.abs() + self.config.priority_floor).powf(self.config.priority_exponent);
            self.tree.set(idx.slot, p);
            self.max_priority = self.max_priority.max(p);
        }
        Ok(())
    }

    /// Sets a raw priority directly, bypassing the TD transform.
    pub fn set_priority(&mut self, index: SampleIndex, priority: f64) -> Result<()> {
        if self.entry(index).is_none() {
            return Err(Error::Input(format!("slot {} is stale or empty", index.slot)));
        }
        if !(priority >= 0.0 && priority.is_finite()) {
            return Err(Error::Input(format!("invalid priority {priority}")));
        }
        self.tree.set(index.slot, priority);
        self.max_priority = self.max_priority.max(priority);
        Ok(())
    }
}

/// `w_i = (N·P(i))^{-β}` divided by the largest weight in the batch.
pub fn importance_weights(probs: &[f64], size: usize, beta: f64) -> Vec<f64> {
    let raw: Vec<f64> = probs
        .iter()
        .map(|&p| (size as f64 * p).powf(-beta))
        .collect();
    let max = raw.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
    raw.into_iter().map(|w| w / max).collect()
}

fn prev_float(x: f64) -> f64 {
    if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::observation::{Frame, Observation, Shape3};

    fn obs(tag: u8) -> Observation {
        Observation::new(vec![Frame::new(Shape3::new(1, 1, 1), vec![tag])])
    }

    fn entry(tag: u8) -> NStepEntry {
        NStepEntry {
            obs: obs(tag),
            action: 0,
            return_n: tag as f64,
            next_obs: obs(tag),
            discount_n: 0.99,
            bootstrap: true,
            steps: 1,
        }
    }

    fn config(capacity: usize) -> ReplayConfig {
        ReplayConfig {
            capacity,
            n: 1,
            beta_anneal_frames: 1000,
            ..ReplayConfig::default()
        }
    }

    #[test]
    fn beta_schedule() {
        let c = config(4);
        assert_eq!(c.beta_at(0), 0.45);
        assert_eq!(c.beta_at(1000), 1.0);
        assert_eq!(c.beta_at(5000), 1.0);
        assert!((c.beta_at(500) - 0.725).abs() < 1e-15);
    }

    #[test]
    fn weights_hand_case() {
        let w = importance_weights(&[0.1, 0.2, 0.3, 0.4], 4, 1.0);
        let expected = [1.0, 0.5, 1.0 / 3.0, 0.25];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn equal_priorities_give_unit_weights() {
        let mut r = PrioritizedReplay::new(config(8), 1).unwrap();
        for i in 0..8 {
            r.insert(entry(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = r.sample(4, 0, &mut rng).unwrap();
        assert!(b.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn floor_priority_for_zero_td() {
        let mut r = PrioritizedReplay::new(config(2), 1).unwrap();
        let i = r.insert(entry(0));
        r.update_priorities(&[i], &[0.0]).unwrap();
        assert!((r.priority(i.slot) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn single_leaf_total_tracks_update() {
        let mut r = PrioritizedReplay::new(config(1), 1).unwrap();
        let i = r.insert(entry(0));
        r.update_priorities(&[i], &[3.0]).unwrap();
        assert_eq!(r.total_priority(), r.priority(0));
    }

    #[test]
    fn set_leaf_to_three() {
        let mut r = PrioritizedReplay::new(config(4), 1).unwrap();
        let idx: Vec<_> = (0..4).map(|i| r.insert(entry(i))).collect();
        assert_eq!(r.total_priority(), 4.0);
        // (|δ| + 1e-6)^0.5 = 3
        r.update_priorities(&[idx[2]], &[9.0 - 1e-6]).unwrap();
        assert!((r.total_priority() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn stale_updates_are_counted_and_skipped() {
        let mut r = PrioritizedReplay::new(config(2), 1).unwrap();
        let first = r.insert(entry(0));
        r.insert(entry(1));
        r.insert(entry(2)); // overwrites slot 0
        r.update_priorities(&[first], &[5.0]).unwrap();
        assert_eq!(r.stale_updates(), 1);
        assert_eq!(r.priority(0), 1.0);
    }

    #[test]
    fn not_ready_when_too_small() {
        let mut r = PrioritizedReplay::new(config(8), 1).unwrap();
        r.insert(entry(0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(r.sample(2, 0, &mut rng), Err(Error::NotReady { .. })));
    }

    #[test]
    fn zero_capacity_is_config_error() {
        assert!(matches!(PrioritizedReplay::new(config(0), 1), Err(Error::Config(_))));
    }

    #[test]
    fn new_entries_enter_at_max_priority() {
        let mut r = PrioritizedReplay::new(config(4), 1).unwrap();
        let i = r.insert(entry(0));
        r.update_priorities(&[i], &[24.0 - 1e-6]).unwrap();
        let j = r.insert(entry(1));
        assert!((r.priority(j.slot) - 24f64.sqrt()).abs() < 1e-12);
    }
}
