//! The learner: n-step double-DQN targets, importance-weighted loss, Adam
//! with a batch-scaled ε, the ε-greedy schedule and target synchronization.

mod adam;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use adam::Adam;

use crate::error::{Error, Result};
use crate::network::{argmax, NoiseDraw, ParameterStore, QNetwork, Real, Weights};
use crate::observation::{stack_batch, Observation};
use crate::replay::{NStepEntry, SampledBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Huber with κ = 1.
    Huber,
    Mse,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Huber => "huber",
            LossKind::Mse => "mse",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "huber" => Ok(LossKind::Huber),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::Config(format!("unknown loss `{other}` (huber|mse)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub gamma: f64,
    pub n: usize,
    pub learning_rate: f64,
    /// Fixed Adam ε; `None` uses `0.005 / batch_size`.
    pub adam_eps: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub grad_clip_norm: f64,
    pub target_sync_frames: u64,
    pub eps_initial: f64,
    pub eps_final: f64,
    pub eps_decay_frames: u64,
    pub loss: LossKind,
    pub batch_size: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            n: 3,
            learning_rate: 0.00025,
            adam_eps: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            grad_clip_norm: 10.0,
            target_sync_frames: 32_000,
            eps_initial: 1.0,
            eps_final: 0.01,
            eps_decay_frames: 500_000,
            loss: LossKind::Huber,
            batch_size: 256,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.n == 0 || self.batch_size == 0 {
            return bad("n and batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip_norm > 0.0) {
            return bad("learning rate and gradient clip norm must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if let Some(e) = self.adam_eps {
            if !(e > 0.0) {
                return bad(format!("Adam epsilon must be positive, got {e}"));
            }
        }
        if self.target_sync_frames == 0 {
            return bad("target sync period must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.eps_final) || !(0.0..=1.0).contains(&self.eps_initial) || self.eps_final > self.eps_initial {
            return bad(format!(
                "need 0 <= eps_final <= eps_initial <= 1, got {} and {}",
                self.eps_final, self.eps_initial
            ));
        }
        Ok(())
    }

    pub fn adam_epsilon(&self) -> f64 {
        self.adam_eps.unwrap_or(0.005 / self.batch_size as f64)
    }

    /// Linear decay from `eps_initial` to `eps_final`, then flat.
    pub fn epsilon_at(&self, frame: u64) -> f64 {
        if self.eps_decay_frames == 0 || frame >= self.eps_decay_frames {
            return self.eps_final;
        }
        let t = frame as f64 / self.eps_decay_frames as f64;
        self.eps_initial + (self.eps_final - self.eps_initial) * t
    }
}

/// `y = G + discount·bootstrap·q_target(s', argmax_a q_online(s', a))`, with
/// `q_*_next` laid out `[batch × actions]`.
pub fn double_dqn_targets(
    returns: &[f64],
    discounts: &[f64],
    bootstrap: &[bool],
    q_online_next: &[f64],
    q_target_next: &[f64],
    actions: usize,
) -> Vec<f64> {
    returns
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            if !bootstrap[i] {
                return g;
            }
            let row = i * actions..(i + 1) * actions;
            let a = argmax(&q_online_next[row.clone()]);
            g + discounts[i] * q_target_next[row][a]
        })
        .collect()
}

/// Per-element loss of `δ = y − q`.
pub fn element_loss(kind: LossKind, delta: f64) -> f64 {
    match kind {
        LossKind::Huber if delta.abs() <= 1.0 => 0.5 * delta * delta,
        LossKind::Huber => delta.abs() - 0.5,
        LossKind::Mse => delta * delta,
    }
}

/// Importance-weighted mean loss and its gradient with respect to each `q_sa`.
pub fn weighted_loss(kind: LossKind, q_sa: &[f64], y: &[f64], w: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(q_sa.len(), y.len());
    assert_eq!(q_sa.len(), w.len());
    let inv_b = 1.0 / q_sa.len().max(1) as f64;
    let mut total = 0.0;
    let grad = q_sa
        .iter()
        .zip(y)
        .zip(w)
        .map(|((&q, &y), &w)| {
            let delta = y - q;
            total += w * element_loss(kind, delta);
            let d = match kind {
                LossKind::Huber => delta.clamp(-1.0, 1.0),
                LossKind::Mse => 2.0 * delta,
            };
            -w * d * inv_b
        })
        .collect();
    (total * inv_b, grad)
}

pub fn td_errors(q_sa: &[f64], y: &[f64]) -> Vec<f64> {
    q_sa.iter().zip(y).map(|(q, y)| (y - q).abs()).collect()
}

/// Factor that brings a gradient of norm `norm` down to at most `max_norm`.
pub fn clip_factor(norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Train,
    Eval,
}

/// Chooses one action per observation.
///
/// Train mode: with probability `ε(frame)` a uniform action, otherwise the
/// greedy action under a fresh noise draw per observation. Eval mode: greedy
/// with zero noise. Ties go to the lowest action index.
#[allow(clippy::too_many_arguments)]
pub fn act_batch<T: Real, R: Rng + ?Sized>(
    net: &QNetwork,
    config: &AgentConfig,
    weights: &Weights<T>,
    obs: &[Observation],
    frame: u64,
    rng: &mut R,
    mode: ActMode,
) -> Result<Vec<usize>> {
    if obs.is_empty() {
        return Ok(Vec::new());
    }
    let shape = net.input_shape();
    if let Some(o) = obs.iter().find(|o| o.shape() != shape) {
        return Err(Error::Input(format!("observation shape {} does not match network input {shape}", o.shape())));
    }
    let actions = net.num_actions();
    let x: Vec<T> = stack_batch(obs, shape);
    let q = match mode {
        ActMode::Eval => net.forward(weights, &x, obs.len(), None)?,
        ActMode::Train => {
            let eps = config.epsilon_at(frame);
            let explore: Vec<Option<usize>> = obs
                .iter()
                .map(|_| (rng.random::<f64>() < eps).then(|| rng.random_range(0..actions)))
                .collect();
            if explore.iter().all(Option::is_some) {
                return Ok(explore.into_iter().flatten().collect());
            }
            let q = if net.spec().noisy {
                let draws: Vec<NoiseDraw<T>> = obs.iter().map(|_| net.sample_noise(rng)).collect();
                net.forward_row_noise(weights, &x, obs.len(), &draws)?
            } else {
                net.forward(weights, &x, obs.len(), None)?
            };
            return Ok(explore
                .into_iter()
                .zip(q.chunks(actions))
                .map(|(e, row)| e.unwrap_or_else(|| argmax(row)))
                .collect());
        }
    };
    Ok(q.chunks(actions).map(argmax).collect())
}

/// What one gradient step reports.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub mean_q: f64,
    /// `|y − q(s, a)|` per batch element, for priority updates.
    pub td_abs: Vec<f64>,
}

/// Online and target networks plus optimizer state.
pub struct Agent<T> {
    config: AgentConfig,
    net: QNetwork,
    store: ParameterStore<T>,
    adam: Adam<T>,
    sync_periods: u64,
    updates: u64,
}

impl<T: Real> Agent<T> {
    /// Initializes θ from `rng` and copies it into θ⁻.
    pub fn new<R: Rng + ?Sized>(config: AgentConfig, net: QNetwork, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let store = net.init::<T, R>(rng);
        Ok(Self::from_store(config, net, store))
    }

    pub fn from_store(config: AgentConfig, net: QNetwork, store: ParameterStore<T>) -> Self {
        let adam = Adam::new(
            &store.online.tensors,
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_epsilon(),
        );
        Self {
            config,
            net,
            store,
            adam,
            sync_periods: 0,
            updates: 0,
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn net(&self) -> &QNetwork {
        &self.net
    }

    pub fn store(&self) -> &ParameterStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    pub fn online(&self) -> &Weights<T> {
        &self.store.online
    }

    pub fn adam(&self) -> &Adam<T> {
        &self.adam
    }

    pub fn adam_mut(&mut self) -> &mut Adam<T> {
        &mut self.adam
    }

    /// Gradient steps taken so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Number of target-sync boundaries already honoured.
    pub fn sync_periods(&self) -> u64 {
        self.sync_periods
    }

    pub fn restore_counters(&mut self, updates: u64, sync_periods: u64) {
        self.updates = updates;
        self.sync_periods = sync_periods;
    }

    /// Copies θ into θ⁻ if `frame` has reached a sync boundary not yet honoured.
    pub fn maybe_sync_target(&mut self, frame: u64) -> bool {
        let periods = frame / self.config.target_sync_frames;
        if periods > self.sync_periods {
            self.sync_periods = periods;
            self.store.sync_target();
            true
        } else {
            false
        }
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &[Observation], frame: u64, rng: &mut R, mode: ActMode) -> Result<Vec<usize>> {
        act_batch(&self.net, &self.config, &self.store.online, obs, frame, rng, mode)
    }

    fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<NoiseDraw<T>> {
        self.net.spec().noisy.then(|| self.net.sample_noise(rng))
    }

    /// Double-DQN targets for `entries`; the online pass uses `online_noise`.
    pub fn compute_targets<R: Rng + ?Sized>(
        &self,
        entries: &[NStepEntry],
        online_noise: Option<&NoiseDraw<T>>,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let b = entries.len();
        let shape = self.net.input_shape();
        let x_next: Vec<T> = stack_batch(entries.iter().map(|e| &e.next_obs), shape);
        let target_noise = self.noise(rng);
        let q_online = self.net.forward(&self.store.online, &x_next, b, online_noise)?;
        let q_target = self.net.forward(&self.store.target, &x_next, b, target_noise.as_ref())?;
        let to64 = |v: Vec<T>| v.into_iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect::<Vec<f64>>();
        let returns: Vec<f64> = entries.iter().map(|e| e.return_n).collect();
        let discounts: Vec<f64> = entries.iter().map(|e| e.discount_n).collect();
        let bootstrap: Vec<bool> = entries.iter().map(|e| e.bootstrap).collect();
        Ok(double_dqn_targets(
            &returns,
            &discounts,
            &bootstrap,
            &to64(q_online),
            &to64(q_target),
            self.net.num_actions(),
        ))
    }

    /// One clipped Adam update on a sampled batch. Parameters are left
    /// untouched when the loss or the gradient is not finite.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &SampledBatch, rng: &mut R) -> Result<TrainMetrics> {
        let b = batch.entries.len();
        if b == 0 || batch.weights.len() != b {
            return Err(Error::Input(format!(
                "batch of {b} entries with {} weights",
                batch.weights.len()
            )));
        }
        let actions = self.net.num_actions();
        if let Some(e) = batch.entries.iter().find(|e| e.action >= actions) {
            return Err(Error::Input(format!("action {} out of range for {actions} actions", e.action)));
        }
        let online_noise = self.noise(rng);
        let shape = self.net.input_shape();
        let x: Vec<T> = stack_batch(batch.entries.iter().map(|e| &e.obs), shape);
        let q = self.net.forward_train(&mut self.store, &x, b, online_noise.as_ref())?;
        let y = self.compute_targets(&batch.entries, online_noise.as_ref(), rng)?;

        let q_sa: Vec<f64> = batch
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| q[i * actions + e.action].to_f64().unwrap_or(f64::NAN))
            .collect();
        let (loss, dq_sa) = weighted_loss(self.config.loss, &q_sa, &y, &batch.weights);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss is {loss} at update {} (mean |y| {:.3e}, mean |q| {:.3e})",
                self.updates,
                y.iter().map(|v| v.abs()).sum::<f64>() / b as f64,
                q_sa.iter().map(|v| v.abs()).sum::<f64>() / b as f64
            )));
        }
        let mut dq = vec![T::zero(); b * actions];
        for (i, (e, g)) in batch.entries.iter().zip(&dq_sa).enumerate() {
            dq[i * actions + e.action] = T::of(*g);
        }
        self.net.backward(&mut self.store, &dq)?;
        let grad_norm = self.store.grad_norm().to_f64().unwrap_or(f64::NAN);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient norm is {grad_norm} at update {} (loss {loss:.6e})",
                self.updates
            )));
        }
        let scale = clip_factor(grad_norm, self.config.grad_clip_norm);
        self.adam.step(&mut self.store.online.tensors, &self.store.grads, scale);
        self.updates += 1;
        Ok(TrainMetrics {
            loss,
            grad_norm,
            mean_q: q_sa.iter().sum::<f64>() / b as f64,
            td_abs: td_errors(&q_sa, &y),
        })
    }
}

#[cfg(test)]
mod tests;
