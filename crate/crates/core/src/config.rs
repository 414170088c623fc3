//! Flat `key = value` run configuration.
//!
//! Sources are layered file < environment (`SWIFTQ_<KEY>`) < command-line
//! overrides. Every key has a default; unknown keys are errors. Preprocessing
//! keys accept `auto`, meaning "use the selected environment's profile".

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::agent::{AgentConfig, LossKind};
use crate::envs::{EnvKind, PreprocessConfig};
use crate::error::{Error, Result};
use crate::network::{NetworkSpec, SnVariant};
use crate::replay::ReplayConfig;
use crate::trainer::{Mode, Schedule};

/// Prefix of environment-variable overrides.
pub const ENV_PREFIX: &str = "SWIFTQ_";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub mode: Mode,

    pub base_channels: Vec<usize>,
    pub channel_multiplier: usize,
    pub blocks_per_stage: usize,
    pub sn: SnVariant,
    pub dueling: bool,
    pub noisy: bool,
    pub sigma0: f64,
    pub hidden_units: usize,
    pub adaptive_pool: usize,

    pub gamma: f64,
    pub n: usize,
    pub learning_rate: f64,
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

    pub replay_capacity: usize,
    pub priority_exponent: f64,
    pub priority_floor: f64,
    pub beta0: f64,
    /// `None` anneals over `total_frames`.
    pub beta_anneal_frames: Option<u64>,

    pub grayscale: Option<bool>,
    pub frame_skip: Option<usize>,
    pub frame_stack: Option<usize>,
    pub resolution: Option<(usize, usize)>,
    pub max_pool: Option<bool>,
    pub noop_max: Option<usize>,
    pub time_limit_frames: Option<u64>,

    pub num_envs: usize,
    pub train_steps_per_vector_step: f64,
    pub warmup_frames: u64,
    pub total_frames: u64,
    pub snapshot_period_frames: u64,

    pub eval_budget_frames: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetworkSpec::default();
        let agent = AgentConfig::default();
        let replay = ReplayConfig::default();
        let schedule = Schedule::default();
        Self {
            env: EnvKind::MiniCatch,
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            mode: Mode::Serial,
            base_channels: net.base_channels,
            channel_multiplier: net.channel_multiplier,
            blocks_per_stage: net.blocks_per_stage,
            sn: net.sn_variant,
            dueling: net.dueling,
            noisy: net.noisy,
            sigma0: net.sigma0,
            hidden_units: net.hidden_units,
            adaptive_pool: net.adaptive_pool,
            gamma: agent.gamma,
            n: agent.n,
            learning_rate: agent.learning_rate,
            adam_eps: agent.adam_eps,
            adam_beta1: agent.adam_beta1,
            adam_beta2: agent.adam_beta2,
            grad_clip_norm: agent.grad_clip_norm,
            target_sync_frames: agent.target_sync_frames,
            eps_initial: agent.eps_initial,
            eps_final: agent.eps_final,
            eps_decay_frames: agent.eps_decay_frames,
            loss: agent.loss,
            batch_size: agent.batch_size,
            replay_capacity: replay.capacity,
            priority_exponent: replay.priority_exponent,
            priority_floor: replay.priority_floor,
            beta0: replay.beta0,
            beta_anneal_frames: None,
            grayscale: None,
            frame_skip: None,
            frame_stack: None,
            resolution: None,
            max_pool: None,
            noop_max: None,
            time_limit_frames: None,
            num_envs: schedule.num_envs,
            train_steps_per_vector_step: schedule.train_steps_per_vector_step,
            warmup_frames: schedule.warmup_frames,
            total_frames: schedule.total_frames,
            snapshot_period_frames: schedule.snapshot_period_frames,
            eval_budget_frames: 500_000,
        }
    }
}

fn invalid(key: &str, value: &str, why: impl Display) -> Error {
    Error::Config(format!("invalid value `{value}` for `{key}`: {why}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| invalid(key, value, e))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(invalid(key, value, "expected true or false")),
    }
}

fn auto<T>(value: &str, parse: impl FnOnce() -> Result<T>) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse().map(Some)
    }
}

fn show_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

fn resolution(key: &str, value: &str) -> Result<(usize, usize)> {
    let (h, w) = value
        .split_once('x')
        .ok_or_else(|| invalid(key, value, "expected HEIGHTxWIDTH"))?;
    Ok((num(key, h.trim())?, num(key, w.trim())?))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "env" => self.env = v.parse()?,
            "seed" => self.seed = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "mode" => self.mode = v.parse()?,
            "base_channels" => {
                self.base_channels = v
                    .split(',')
                    .map(|c| num::<usize>(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "channel_multiplier" => self.channel_multiplier = num(key, v)?,
            "blocks_per_stage" => self.blocks_per_stage = num(key, v)?,
            "sn" => self.sn = v.parse()?,
            "dueling" => self.dueling = boolean(key, v)?,
            "noisy" => self.noisy = boolean(key, v)?,
            "sigma0" => self.sigma0 = num(key, v)?,
            "hidden_units" => self.hidden_units = num(key, v)?,
            "adaptive_pool" => self.adaptive_pool = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "n" => self.n = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "adam_eps" => self.adam_eps = auto(v, || num(key, v))?,
            "adam_beta1" => self.adam_beta1 = num(key, v)?,
            "adam_beta2" => self.adam_beta2 = num(key, v)?,
            "grad_clip_norm" => self.grad_clip_norm = num(key, v)?,
            "target_sync_frames" => self.target_sync_frames = num(key, v)?,
            "eps_initial" => self.eps_initial = num(key, v)?,
            "eps_final" => self.eps_final = num(key, v)?,
            "eps_decay_frames" => self.eps_decay_frames = num(key, v)?,
            "loss" => self.loss = v.parse()?,
            "batch_size" => self.batch_size = num(key, v)?,
            "replay_capacity" => self.replay_capacity = num(key, v)?,
            "priority_exponent" => self.priority_exponent = num(key, v)?,
            "priority_floor" => self.priority_floor = num(key, v)?,
            "beta0" => self.beta0 = num(key, v)?,
            "beta_anneal_frames" => self.beta_anneal_frames = auto(v, || num(key, v))?,
            "grayscale" => self.grayscale = auto(v, || boolean(key, v))?,
            "frame_skip" => self.frame_skip = auto(v, || num(key, v))?,
            "frame_stack" => self.frame_stack = auto(v, || num(key, v))?,
            "resolution" => self.resolution = auto(v, || resolution(key, v))?,
            "max_pool" => self.max_pool = auto(v, || boolean(key, v))?,
            "noop_max" => self.noop_max = auto(v, || num(key, v))?,
            "time_limit_frames" => self.time_limit_frames = auto(v, || num(key, v))?,
            "num_envs" => self.num_envs = num(key, v)?,
            "train_steps_per_vector_step" => self.train_steps_per_vector_step = num(key, v)?,
            "warmup_frames" => self.warmup_frames = num(key, v)?,
            "total_frames" => self.total_frames = num(key, v)?,
            "snapshot_period_frames" => self.snapshot_period_frames = num(key, v)?,
            "eval_budget_frames" => self.eval_budget_frames = num(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let channels = self
            .base_channels
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("env", self.env.to_string()),
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("mode", self.mode.to_string()),
            ("base_channels", channels),
            ("channel_multiplier", self.channel_multiplier.to_string()),
            ("blocks_per_stage", self.blocks_per_stage.to_string()),
            ("sn", self.sn.to_string()),
            ("dueling", self.dueling.to_string()),
            ("noisy", self.noisy.to_string()),
            ("sigma0", self.sigma0.to_string()),
            ("hidden_units", self.hidden_units.to_string()),
            ("adaptive_pool", self.adaptive_pool.to_string()),
            ("gamma", self.gamma.to_string()),
            ("n", self.n.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("adam_eps", show_opt(&self.adam_eps)),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("grad_clip_norm", self.grad_clip_norm.to_string()),
            ("target_sync_frames", self.target_sync_frames.to_string()),
            ("eps_initial", self.eps_initial.to_string()),
            ("eps_final", self.eps_final.to_string()),
            ("eps_decay_frames", self.eps_decay_frames.to_string()),
            ("loss", self.loss.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("replay_capacity", self.replay_capacity.to_string()),
            ("priority_exponent", self.priority_exponent.to_string()),
            ("priority_floor", self.priority_floor.to_string()),
            ("beta0", self.beta0.to_string()),
            ("beta_anneal_frames", show_opt(&self.beta_anneal_frames)),
            ("grayscale", show_opt(&self.grayscale)),
            ("frame_skip", show_opt(&self.frame_skip)),
            ("frame_stack", show_opt(&self.frame_stack)),
            (
                "resolution",
                self.resolution.map_or_else(|| "auto".to_string(), |(h, w)| format!("{h}x{w}")),
            ),
            ("max_pool", show_opt(&self.max_pool)),
            ("noop_max", show_opt(&self.noop_max)),
            ("time_limit_frames", show_opt(&self.time_limit_frames)),
            ("num_envs", self.num_envs.to_string()),
            ("train_steps_per_vector_step", self.train_steps_per_vector_step.to_string()),
            ("warmup_frames", self.warmup_frames.to_string()),
            ("total_frames", self.total_frames.to_string()),
            ("snapshot_period_frames", self.snapshot_period_frames.to_string()),
            ("eval_budget_frames", self.eval_budget_frames.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip(e))))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `SWIFTQ_<KEY>` variables found by `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        for key in Self::keys() {
            let var = format!("{ENV_PREFIX}{}", key.to_ascii_uppercase());
            if let Some(v) = lookup(&var) {
                self.set(key, &v)
                    .map_err(|e| Error::Config(format!("{var}: {}", strip(e))))?;
            }
        }
        Ok(())
    }

    /// The effective configuration as text accepted by [`RunConfig::parse`].
    pub fn emit(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            base_channels: self.base_channels.clone(),
            channel_multiplier: self.channel_multiplier,
            blocks_per_stage: self.blocks_per_stage,
            sn_variant: self.sn,
            dueling: self.dueling,
            noisy: self.noisy,
            sigma0: self.sigma0,
            hidden_units: self.hidden_units,
            adaptive_pool: self.adaptive_pool,
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            gamma: self.gamma,
            n: self.n,
            learning_rate: self.learning_rate,
            adam_eps: self.adam_eps,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            grad_clip_norm: self.grad_clip_norm,
            target_sync_frames: self.target_sync_frames,
            eps_initial: self.eps_initial,
            eps_final: self.eps_final,
            eps_decay_frames: self.eps_decay_frames,
            loss: self.loss,
            batch_size: self.batch_size,
        }
    }

    pub fn replay_config(&self) -> ReplayConfig {
        ReplayConfig {
            capacity: self.replay_capacity,
            n: self.n,
            gamma: self.gamma,
            priority_exponent: self.priority_exponent,
            priority_floor: self.priority_floor,
            beta0: self.beta0,
            beta_anneal_frames: self.beta_anneal_frames.unwrap_or(self.total_frames),
        }
    }

    /// The environment's profile with any explicit overrides applied.
    pub fn preprocess_config(&self) -> PreprocessConfig {
        let mut p = self.env.make().profile();
        if let Some(v) = self.grayscale {
            p.grayscale = v;
        }
        if let Some(v) = self.frame_skip {
            p.frame_skip = v;
        }
        if let Some(v) = self.frame_stack {
            p.frame_stack = v;
        }
        if let Some((h, w)) = self.resolution {
            p.height = h;
            p.width = w;
        }
        if let Some(v) = self.max_pool {
            p.max_pool = v;
        }
        if let Some(v) = self.noop_max {
            p.noop_max = v;
        }
        if let Some(v) = self.time_limit_frames {
            p.time_limit_frames = v;
        }
        p
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            batch_size: self.batch_size,
            num_envs: self.num_envs,
            train_steps_per_vector_step: self.train_steps_per_vector_step,
            warmup_frames: self.warmup_frames,
            total_frames: self.total_frames,
            snapshot_period_frames: self.snapshot_period_frames,
        }
    }

    /// Checks every derived component and the cross-component constraints.
    pub fn validate(&self) -> Result<()> {
        self.network_spec().validate()?;
        self.agent_config().validate()?;
        self.replay_config().validate()?;
        let pre = self.preprocess_config();
        pre.validate()?;
        let schedule = self.schedule();
        schedule.validate()?;
        let warm_vectors = schedule.warmup_vector_steps(pre.frame_skip) + 1;
        let ready = warm_vectors * self.num_envs as u64;
        let needed = (self.batch_size + self.num_envs * self.n.saturating_sub(1)) as u64;
        if ready < needed {
            return Err(Error::Config(format!(
                "warmup leaves {ready} transitions before the first update; need at least batch_size + num_envs*(n-1) = {needed}"
            )));
        }
        if self.eval_budget_frames == 0 {
            return Err(Error::Config("eval_budget_frames must be positive".into()));
        }
        Ok(())
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
