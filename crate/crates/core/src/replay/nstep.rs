//! Per-environment n-step window assembly.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::observation::Observation;

/// One agent-level environment step as handed to replay.
///
/// `next_obs` is the true successor observation, taken before any auto-reset,
/// so timeout-truncated windows can still bootstrap from it.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Observation,
    pub action: usize,
    pub reward: f32,
    pub next_obs: Observation,
    pub done: bool,
    pub timeout: bool,
    pub env_id: usize,
}

/// An n-step learning sample.
#[derive(Debug, Clone)]
pub struct NStepEntry {
    pub obs: Observation,
    pub action: usize,
    /// `Σ_{i<m} γ^i r_{t+i}` over the `m <= n` steps of the window.
    pub return_n: f64,
    pub next_obs: Observation,
    /// `γ^m`.
    pub discount_n: f64,
    /// False when the episode terminated inside the window.
    pub bootstrap: bool,
    /// Window length `m`.
    pub steps: usize,
}

/// Turns per-env transition streams into n-step entries.
#[derive(Debug, Clone)]
pub struct NStepAssembler {
    n: usize,
    gamma: f64,
    pending: Vec<VecDeque<Transition>>,
}

impl NStepAssembler {
    pub fn new(n: usize, gamma: f64, num_envs: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("n-step length must be at least 1".into()));
        }
        if num_envs == 0 {
            return Err(Error::Config("at least one environment is required".into()));
        }
        Ok(Self {
            n,
            gamma,
            pending: vec![VecDeque::with_capacity(n); num_envs],
        })
    }

    pub fn num_envs(&self) -> usize {
        self.pending.len()
    }

    /// Appends `t` to its env queue and returns every entry that became complete.
    pub fn push(&mut self, t: Transition) -> Result<Vec<NStepEntry>> {
        let num_envs = self.pending.len();
        let queue = self
            .pending
            .get_mut(t.env_id)
            .ok_or_else(|| Error::Input(format!("unknown env_id {} (have {num_envs})", t.env_id)))?;
        let ended = t.done || t.timeout;
        let terminal = t.done;
        queue.push_back(t);

        let mut out = Vec::new();
        if ended {
            while !queue.is_empty() {
                out.push(window(queue, queue.len(), self.gamma, !terminal));
                queue.pop_front();
            }
        } else if queue.len() == self.n {
            out.push(window(queue, self.n, self.gamma, true));
            queue.pop_front();
        }
        Ok(out)
    }

    /// Transitions waiting for their window to close, per env.
    pub fn pending_len(&self, env_id: usize) -> usize {
        self.pending[env_id].len()
    }
}

fn window(queue: &VecDeque<Transition>, m: usize, gamma: f64, bootstrap: bool) -> NStepEntry {
    let first = &queue[0];
    let last = &queue[m - 1];
    let mut return_n = 0.0;
    let mut discount = 1.0;
    for t in queue.iter().take(m) {
        return_n += discount * t.reward as f64;
        discount *= gamma;
    }
    NStepEntry {
        obs: first.obs.clone(),
        action: first.action,
        return_n,
        next_obs: last.next_obs.clone(),
        discount_n: discount,
        bootstrap,
        steps: m,
    }
}
