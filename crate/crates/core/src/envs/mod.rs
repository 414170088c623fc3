//! Environments: the adapter contract, the preprocessing pipeline, the
//! vectorized wrapper and two built-in environments with exact oracles.
//!
//! An emulator binding implements [`Environment`] (reset, step, action count,
//! raw frame shape) and names the [`PreprocessConfig`] profile it expects;
//! everything downstream only sees preprocessed [`Observation`]s.

mod chain;
mod minicatch;
mod preprocess;
mod vector;

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

pub use chain::{chain_optimal_q, ChainMdp};
pub use minicatch::{random_policy_expected_return, MiniCatch};
pub use preprocess::{area_resize, preprocess_frame, Preprocessed, LUMA};
pub use vector::VectorEnv;

use crate::error::{Error, Result};
use crate::observation::{Observation, Shape3};

/// RNG type owned by every environment instance.
pub type EnvRng = ChaCha8Rng;

/// A raw emulator frame, height × width × channels interleaved, values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl RawFrame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * channels, "raw frame data does not match its shape");
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }
}

/// One raw environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStep {
    pub frame: RawFrame,
    pub reward: f64,
    /// The episode reached a terminal state.
    pub done: bool,
    /// The environment's own episode cap was hit.
    pub truncated: bool,
    pub info: Vec<(&'static str, f64)>,
}

/// Adapter contract for anything that can be wrapped by [`Preprocessed`].
pub trait Environment: Send {
    fn name(&self) -> &str;
    fn num_actions(&self) -> usize;
    /// Shape of the frames returned by `reset` and `step`.
    fn raw_shape(&self) -> (usize, usize, usize);
    /// The preprocessing profile this environment is meant to run under.
    fn profile(&self) -> PreprocessConfig;
    fn reset(&mut self, rng: &mut EnvRng) -> RawFrame;
    fn step(&mut self, action: usize, rng: &mut EnvRng) -> RawStep;
    /// Action used for no-op starts.
    fn noop_action(&self) -> usize {
        0
    }
}

impl<E: Environment + ?Sized> Environment for Box<E> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn num_actions(&self) -> usize {
        (**self).num_actions()
    }
    fn raw_shape(&self) -> (usize, usize, usize) {
        (**self).raw_shape()
    }
    fn profile(&self) -> PreprocessConfig {
        (**self).profile()
    }
    fn reset(&mut self, rng: &mut EnvRng) -> RawFrame {
        (**self).reset(rng)
    }
    fn step(&mut self, action: usize, rng: &mut EnvRng) -> RawStep {
        (**self).step(action, rng)
    }
    fn noop_action(&self) -> usize {
        (**self).noop_action()
    }
}

/// Frame pipeline settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub grayscale: bool,
    pub frame_skip: usize,
    pub frame_stack: usize,
    pub height: usize,
    pub width: usize,
    /// Max over the last two raw frames of each skip window.
    pub max_pool: bool,
    pub noop_max: usize,
    /// Episode length cap in raw frames, `0` for none.
    pub time_limit_frames: u64,
}

impl PreprocessConfig {
    /// ALE-style: grayscale 84×84, skip 4, stack 4, max-pooled, 0–30 no-ops.
    pub fn gym() -> Self {
        Self {
            grayscale: true,
            frame_skip: 4,
            frame_stack: 4,
            height: 84,
            width: 84,
            max_pool: true,
            noop_max: 30,
            time_limit_frames: 108_000,
        }
    }

    /// Color 72×96, skip 4, stack 4.
    pub fn retro() -> Self {
        Self {
            grayscale: false,
            height: 72,
            width: 96,
            max_pool: false,
            noop_max: 0,
            ..Self::gym()
        }
    }

    /// Color 64×64, no frame skip, stack 4.
    pub fn procgen() -> Self {
        Self {
            grayscale: false,
            frame_skip: 1,
            height: 64,
            width: 64,
            max_pool: false,
            noop_max: 0,
            ..Self::gym()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_skip == 0 || self.frame_stack == 0 {
            return Err(Error::Config("frame skip and frame stack must be at least 1".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("preprocessed resolution must be positive".into()));
        }
        Ok(())
    }

    /// Channels of one preprocessed frame given the raw channel count.
    pub fn frame_channels(&self, raw_channels: usize) -> usize {
        if self.grayscale && raw_channels == 3 {
            1
        } else {
            raw_channels
        }
    }

    /// Shape of a stacked observation.
    pub fn observation_shape(&self, raw_channels: usize) -> Shape3 {
        Shape3::new(self.frame_channels(raw_channels) * self.frame_stack, self.height, self.width)
    }
}

/// Selectable built-in environments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Chain { n: usize },
    MiniCatch,
}

impl EnvKind {
    pub fn make(&self) -> Box<dyn Environment> {
        match *self {
            EnvKind::Chain { n } => Box::new(ChainMdp::new(n)),
            EnvKind::MiniCatch => Box::new(MiniCatch::new()),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvKind::Chain { n } => write!(f, "chain:{n}"),
            EnvKind::MiniCatch => f.write_str("minicatch"),
        }
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.split_once(':') {
            None if s == "chain" => Ok(EnvKind::Chain { n: 8 }),
            None if s == "minicatch" => Ok(EnvKind::MiniCatch),
            Some(("chain", n)) => match n.parse::<usize>() {
                Ok(n) if n >= 2 => Ok(EnvKind::Chain { n }),
                _ => Err(Error::Config(format!("chain length must be an integer >= 2, got `{n}`"))),
            },
            _ => Err(Error::Config(format!("unknown environment `{s}` (chain[:N]|minicatch)"))),
        }
    }
}

/// Summary of a finished episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub episode_return: f64,
    /// Agent steps.
    pub length: u64,
    /// Raw frames, including no-ops.
    pub frames: u64,
}

/// One preprocessed agent step.
#[derive(Debug, Clone)]
pub struct EnvStep {
    /// Observation to act on next; belongs to a fresh episode after `done || timeout`.
    pub obs: Observation,
    /// True successor of the step, before any auto-reset.
    pub next_obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub timeout: bool,
    pub episode: Option<EpisodeStats>,
    pub info: Vec<(&'static str, f64)>,
}
