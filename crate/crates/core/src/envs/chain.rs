//! A deterministic chain with a single rewarding end state.

use super::{EnvRng, Environment, PreprocessConfig, RawFrame, RawStep};

/// States `0..n` on a line, start at 0; action 0 moves left (clamped at 0),
/// action 1 moves right. Entering `n − 1` pays 1 and ends the episode.
/// Observations are one-hot over `n` channels of a 1×1 frame; episodes are
/// capped at `4n` transitions.
#[derive(Debug, Clone)]
pub struct ChainMdp {
    n: usize,
    state: usize,
    t: usize,
}

impl ChainMdp {
    pub fn new(n: usize) -> Self {
        assert!(n >= 2, "chain needs at least two states");
        Self { n, state: 0, t: 0 }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn cap(&self) -> usize {
        4 * self.n
    }

    /// Raw one-hot frame for `state`.
    pub fn render(n: usize, state: usize) -> RawFrame {
        let mut data = vec![0.0; n];
        data[state] = 1.0;
        RawFrame::new(1, 1, n, data)
    }
}

impl Environment for ChainMdp {
    fn name(&self) -> &str {
        "chain"
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn raw_shape(&self) -> (usize, usize, usize) {
        (1, 1, self.n)
    }

    fn profile(&self) -> PreprocessConfig {
        PreprocessConfig {
            grayscale: false,
            frame_skip: 1,
            frame_stack: 1,
            height: 1,
            width: 1,
            max_pool: false,
            noop_max: 0,
            time_limit_frames: 0,
        }
    }

    fn reset(&mut self, _rng: &mut EnvRng) -> RawFrame {
        self.state = 0;
        self.t = 0;
        Self::render(self.n, 0)
    }

    fn step(&mut self, action: usize, _rng: &mut EnvRng) -> RawStep {
        self.state = match action {
            0 => self.state.saturating_sub(1),
            _ => (self.state + 1).min(self.n - 1),
        };
        self.t += 1;
        let done = self.state == self.n - 1;
        RawStep {
            frame: Self::render(self.n, self.state),
            reward: if done { 1.0 } else { 0.0 },
            done,
            truncated: !done && self.t >= self.cap(),
            info: Vec::new(),
        }
    }
}

/// Optimal action values `Q*(s, [left, right])` by value iteration.
pub fn chain_optimal_q(n: usize, gamma: f64) -> Vec<[f64; 2]> {
    let terminal = n - 1;
    let mut v = vec![0.0f64; n];
    let backup = |v: &[f64], s: usize, a: usize| {
        let next = if a == 0 { s.saturating_sub(1) } else { (s + 1).min(terminal) };
        if next == terminal {
            1.0
        } else {
            gamma * v[next]
        }
    };
    for _ in 0..10_000 {
        let mut delta = 0.0f64;
        for s in 0..terminal {
            let best = backup(&v, s, 0).max(backup(&v, s, 1));
            delta = delta.max((best - v[s]).abs());
            v[s] = best;
        }
        if delta < 1e-15 {
            break;
        }
    }
    (0..n)
        .map(|s| if s == terminal { [0.0, 0.0] } else { [backup(&v, s, 0), backup(&v, s, 1)] })
        .collect()
}
