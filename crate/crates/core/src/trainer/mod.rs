//! The training loop: vectorized collection interleaved with `k` gradient
//! steps of batch `b` per vector step, optionally overlapped.
//!
//! Every iteration pushes the `e` transitions of the last collected vector
//! step into replay, syncs the target on frame boundaries, then (a) collects
//! the next vector step with a frozen copy of the current online weights and
//! (b) runs this iteration's gradient steps. Serial mode does (a) then (b);
//! overlap mode runs them on two threads. The actor sees the same weights in
//! both modes, so the transition streams are identical.

mod bench;
mod checkpoint;

use std::fmt;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use bench::{modification_stack, run_bench, throughput_report, write_bench_csv, ThroughputRow};
pub use checkpoint::{load_snapshot, read_tensor_file, save_snapshot, write_tensor_file, LoadedSnapshot, SnapshotMeta};

use crate::agent::{act_batch, ActMode, Agent, AgentConfig, TrainMetrics};
use crate::config::RunConfig;
use crate::envs::{EnvStep, PreprocessConfig, VectorEnv};
use crate::error::{Error, Result};
use crate::network::{QNetwork, Weights};
use crate::observation::Observation;
use crate::replay::{PrioritizedReplay, Transition};

/// RNG stream ids derived from the run seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const LEARNER: u64 = 2;
    pub const ACTOR: u64 = 3;
    pub const REPLAY: u64 = 4;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Serial,
    Overlap,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Serial => "serial",
            Mode::Overlap => "overlap",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "serial" => Ok(Mode::Serial),
            "overlap" => Ok(Mode::Overlap),
            other => Err(Error::Config(format!("unknown mode `{other}` (serial|overlap)"))),
        }
    }
}

/// Interleave and budget, all in frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub batch_size: usize,
    pub num_envs: usize,
    /// `k`; fractional values spread updates over several vector steps.
    pub train_steps_per_vector_step: f64,
    pub warmup_frames: u64,
    pub total_frames: u64,
    /// `0` disables periodic snapshots.
    pub snapshot_period_frames: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            batch_size: 256,
            num_envs: 64,
            train_steps_per_vector_step: 2.0,
            warmup_frames: 80_000,
            total_frames: 10_000_000,
            snapshot_period_frames: 1_000_000,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.num_envs == 0 || self.total_frames == 0 {
            return Err(Error::Config("batch size, env count and total frames must be positive".into()));
        }
        let k = self.train_steps_per_vector_step;
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::Config(format!("train steps per vector step must be positive, got {k}")));
        }
        Ok(())
    }

    /// `b·k/e`.
    pub fn replay_ratio(&self) -> f64 {
        self.batch_size as f64 * self.train_steps_per_vector_step / self.num_envs as f64
    }

    /// Vector steps completed before the first one that trains.
    pub fn warmup_vector_steps(&self, frame_skip: usize) -> u64 {
        let per = (self.num_envs * frame_skip) as u64;
        self.warmup_frames.div_ceil(per).saturating_sub(1)
    }

    /// Train steps after the `j`-th post-warmup vector step (1-based).
    pub fn train_steps_through(&self, j: u64) -> u64 {
        (self.train_steps_per_vector_step * j as f64).floor() as u64
    }
}

/// Counters and timers of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunState {
    pub frames: u64,
    pub transitions: u64,
    pub vector_steps: u64,
    pub train_steps: u64,
    pub samples: u64,
    pub episodes: u64,
    /// Seconds since the first training iteration started.
    pub timed_secs: f64,
    /// Frames collected since the first training iteration started.
    pub timed_frames: u64,
    pub wall_secs: f64,
    /// Digest over every transition pushed into replay.
    pub transition_digest: String,
}

impl RunState {
    pub fn frames_per_sec(&self) -> f64 {
        rate(self.timed_frames as f64, self.timed_secs)
    }

    pub fn samples_per_sec(&self) -> f64 {
        rate(self.samples as f64, self.timed_secs)
    }
}

fn rate(count: f64, secs: f64) -> f64 {
    if secs > 0.0 {
        count / secs
    } else {
        0.0
    }
}

/// One finished episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeRecord {
    /// Frame counter when the episode ended.
    pub frame: u64,
    pub env: usize,
    pub episode_return: f64,
    pub length: u64,
}

/// Result of [`Trainer::run`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub state: RunState,
    pub episodes: Vec<EpisodeRecord>,
    pub snapshots: Vec<PathBuf>,
}

pub const METRICS_HEADER: [&str; 7] = ["frame", "train_step", "loss", "grad_norm", "mean_q", "epsilon", "beta"];
pub const EPISODES_HEADER: [&str; 4] = ["frame", "env", "return", "length"];

/// Builds the Q-network for `config`'s environment and preprocessing.
pub fn build_network(config: &RunConfig) -> Result<(QNetwork, PreprocessConfig)> {
    let pre = config.preprocess_config();
    pre.validate()?;
    let env = config.env.make();
    let (_, _, channels) = env.raw_shape();
    let net = QNetwork::build(&config.network_spec(), pre.observation_shape(channels), env.num_actions())?;
    Ok((net, pre))
}

/// What the collector produced for one vector step.
struct Collected {
    obs: Vec<Observation>,
    actions: Vec<usize>,
    steps: Vec<EnvStep>,
}

struct Collector {
    net: QNetwork,
    venv: VectorEnv,
    rng: ChaCha8Rng,
}

impl Collector {
    fn collect(&mut self, config: &AgentConfig, weights: &Weights<f32>, frame: u64) -> Result<Collected> {
        let obs = self.venv.observations().to_vec();
        let actions = act_batch(&self.net, config, weights, &obs, frame, &mut self.rng, ActMode::Train)?;
        let steps = self.venv.step(&actions)?;
        Ok(Collected { obs, actions, steps })
    }
}

struct Learner {
    agent: Agent<f32>,
    replay: PrioritizedReplay,
    rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    batch_size: usize,
    metrics: Option<(PathBuf, csv::Writer<File>)>,
    keep_metrics: bool,
    metrics_sink: Vec<TrainMetrics>,
}

impl Learner {
    fn train(&mut self, state: &mut RunState, steps: u64) -> Result<()> {
        for _ in 0..steps {
            let frame = state.frames;
            let batch = self.replay.sample(self.batch_size, frame, &mut self.replay_rng)?;
            let metrics = self.agent.train_step(&batch, &mut self.rng)?;
            self.replay.update_priorities(&batch.indices, &metrics.td_abs)?;
            state.train_steps += 1;
            state.samples += batch.entries.len() as u64;
            if let Some((path, w)) = self.metrics.as_mut() {
                w.write_record(&[
                    frame.to_string(),
                    state.train_steps.to_string(),
                    metrics.loss.to_string(),
                    metrics.grad_norm.to_string(),
                    metrics.mean_q.to_string(),
                    self.agent.config().epsilon_at(frame).to_string(),
                    batch.beta.to_string(),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
            if self.keep_metrics {
                self.metrics_sink.push(metrics);
            }
        }
        Ok(())
    }
}

pub struct Trainer {
    config: RunConfig,
    schedule: Schedule,
    frame_skip: u64,
    warmup_vectors: u64,
    learner: Learner,
    collector: Collector,
    state: RunState,
    hasher: Sha256,
    pending: Option<Collected>,
    episodes: Vec<EpisodeRecord>,
    snapshots: Vec<PathBuf>,
    snapshot_periods: u64,
    out_dir: Option<PathBuf>,
    episode_log: Option<csv::Writer<File>>,
    timer: Option<Instant>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

fn csv_log(dir: &Path, name: &str, header: &[&str]) -> Result<(PathBuf, csv::Writer<File>)> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(header).map_err(|e| csv_err(&path, e))?;
    Ok((path, w))
}

impl Trainer {
    /// Sets up a run; with `write_output` the run directory is created and
    /// the effective config written into it.
    pub fn new(config: RunConfig, write_output: bool) -> Result<Self> {
        config.validate()?;
        let (net, pre) = build_network(&config)?;
        let schedule = config.schedule();
        let mut init_rng = stream_rng(config.seed, streams::INIT);
        let agent = Agent::<f32>::new(config.agent_config(), net.clone(), &mut init_rng)?;
        let replay = PrioritizedReplay::new(config.replay_config(), config.num_envs)?;
        let kind = config.env;
        let venv = VectorEnv::new(|_| kind.make(), config.num_envs, &pre, config.seed)?;
        let (out_dir, metrics, episode_log) = if write_output {
            let dir = config.out_dir.clone();
            fs::create_dir_all(dir.join("snapshots")).map_err(|e| Error::io(&dir, e))?;
            let cfg = dir.join("config.txt");
            fs::write(&cfg, config.emit()).map_err(|e| Error::io(&cfg, e))?;
            let metrics = csv_log(&dir, "metrics.csv", &METRICS_HEADER)?;
            let (_, episodes) = csv_log(&dir, "episodes.csv", &EPISODES_HEADER)?;
            (Some(dir), Some(metrics), Some(episodes))
        } else {
            (None, None, None)
        };
        Ok(Self {
            frame_skip: pre.frame_skip as u64,
            warmup_vectors: schedule.warmup_vector_steps(pre.frame_skip),
            learner: Learner {
                agent,
                replay,
                rng: stream_rng(config.seed, streams::LEARNER),
                replay_rng: stream_rng(config.seed, streams::REPLAY),
                batch_size: schedule.batch_size,
                metrics,
                keep_metrics: false,
                metrics_sink: Vec::new(),
            },
            collector: Collector {
                net,
                venv,
                rng: stream_rng(config.seed, streams::ACTOR),
            },
            schedule,
            state: RunState::default(),
            hasher: Sha256::new(),
            pending: None,
            episodes: Vec::new(),
            snapshots: Vec::new(),
            snapshot_periods: 0,
            out_dir,
            episode_log,
            timer: None,
            config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn agent(&self) -> &Agent<f32> {
        &self.learner.agent
    }

    pub fn replay(&self) -> &PrioritizedReplay {
        &self.learner.replay
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn episodes(&self) -> &[EpisodeRecord] {
        &self.episodes
    }

    pub fn warmup_vector_steps(&self) -> u64 {
        self.warmup_vectors
    }

    /// Keeps every step's metrics in memory (see [`Trainer::metrics`]).
    pub fn keep_metrics(&mut self, keep: bool) {
        self.learner.keep_metrics = keep;
    }

    pub fn metrics(&self) -> &[TrainMetrics] {
        &self.learner.metrics_sink
    }

    pub fn finished(&self) -> bool {
        self.state.frames >= self.schedule.total_frames
    }

    fn push(&mut self, collected: Collected) -> Result<()> {
        let Collected { obs, actions, steps } = collected;
        for (env_id, ((step, &action), o)) in steps.iter().zip(&actions).zip(obs).enumerate() {
            self.hasher.update((env_id as u64).to_le_bytes());
            self.hasher.update((action as u64).to_le_bytes());
            self.hasher.update(step.reward.to_le_bytes());
            self.hasher.update([step.done as u8, step.timeout as u8]);
            for f in step.next_obs.frames() {
                self.hasher.update(f.bytes());
            }
            self.learner.replay.push(Transition {
                obs: o,
                action,
                reward: step.reward as f32,
                next_obs: step.next_obs.clone(),
                done: step.done,
                timeout: step.timeout,
                env_id,
            })?;
        }
        let e = steps.len() as u64;
        self.state.vector_steps += 1;
        self.state.transitions += e;
        self.state.frames += e * self.frame_skip;
        if self.timer.is_some() {
            self.state.timed_frames += e * self.frame_skip;
        }
        for (env, step) in steps.iter().enumerate() {
            let Some(ep) = step.episode else { continue };
            let rec = EpisodeRecord {
                frame: self.state.frames,
                env,
                episode_return: ep.episode_return,
                length: ep.length,
            };
            self.state.episodes += 1;
            self.episodes.push(rec);
            if let (Some(w), Some(dir)) = (self.episode_log.as_mut(), self.out_dir.as_ref()) {
                w.write_record(&[
                    rec.frame.to_string(),
                    env.to_string(),
                    rec.episode_return.to_string(),
                    rec.length.to_string(),
                ])
                .map_err(|e| csv_err(&dir.join("episodes.csv"), e))?;
            }
        }
        Ok(())
    }

    /// Gradient steps owed after the vector step just pushed.
    fn train_quota(&self) -> u64 {
        if self.state.vector_steps <= self.warmup_vectors {
            return 0;
        }
        let j = self.state.vector_steps - self.warmup_vectors;
        self.schedule.train_steps_through(j) - self.schedule.train_steps_through(j - 1)
    }

    /// One interleave iteration. Returns `false` once the frame budget is spent.
    pub fn iterate(&mut self) -> Result<bool> {
        if self.finished() {
            return Ok(false);
        }
        let collected = match self.pending.take() {
            Some(c) => c,
            None => {
                let agent = &self.learner.agent;
                self.collector.collect(agent.config(), agent.online(), self.state.frames)?
            }
        };
        self.push(collected)?;
        self.learner.agent.maybe_sync_target(self.state.frames);
        let quota = self.train_quota();
        if quota > 0 && self.timer.is_none() {
            self.timer = Some(Instant::now());
        }
        let collect_next = !self.finished();
        let frame = self.state.frames;

        let trained = match self.config.mode {
            Mode::Overlap if collect_next => {
                let frozen = self.learner.agent.online().clone();
                let agent_config = self.learner.agent.config().clone();
                let collector = &mut self.collector;
                let learner = &mut self.learner;
                let state = &mut self.state;
                let (collected, trained) = std::thread::scope(|scope| {
                    let handle = scope.spawn(move || collector.collect(&agent_config, &frozen, frame));
                    let trained = learner.train(state, quota);
                    (handle.join(), trained)
                });
                self.pending = Some(collected.map_err(|_| Error::State("collector thread panicked".into()))??);
                trained
            }
            _ => {
                if collect_next {
                    let agent = &self.learner.agent;
                    self.pending = Some(self.collector.collect(agent.config(), agent.online(), frame)?);
                }
                self.learner.train(&mut self.state, quota)
            }
        };
        if let Err(e) = trained {
            if matches!(e, Error::NonFinite(_)) {
                self.save("crash")?;
            }
            return Err(e);
        }
        if let Some(t) = self.timer {
            self.state.timed_secs = t.elapsed().as_secs_f64();
        }
        self.maybe_snapshot()?;
        Ok(!self.finished())
    }

    fn maybe_snapshot(&mut self) -> Result<()> {
        let period = self.schedule.snapshot_period_frames;
        if period == 0 {
            return Ok(());
        }
        let periods = self.state.frames / period;
        if periods > self.snapshot_periods {
            self.snapshot_periods = periods;
            let name = format!("frame_{:012}", periods * period);
            self.save(&name)?;
        }
        Ok(())
    }

    fn flush_logs(&mut self) -> Result<()> {
        let Some(dir) = self.out_dir.as_ref() else {
            return Ok(());
        };
        if let Some((path, w)) = self.learner.metrics.as_mut() {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(w) = self.episode_log.as_mut() {
            w.flush().map_err(|e| Error::io(dir.join("episodes.csv"), e))?;
        }
        Ok(())
    }

    /// Writes `snapshots/<name>` when the run has an output directory.
    pub fn save(&mut self, name: &str) -> Result<Option<PathBuf>> {
        self.flush_logs()?;
        let Some(out) = self.out_dir.as_ref() else {
            return Ok(None);
        };
        let dir = out.join("snapshots").join(name);
        let mut state = self.state.clone();
        state.transition_digest = hex::encode(self.hasher.clone().finalize());
        let meta = SnapshotMeta {
            config: self.config.clone(),
            state,
            updates: self.learner.agent.updates(),
            sync_periods: self.learner.agent.sync_periods(),
            rngs: vec![
                ("learner".into(), self.learner.rng.clone()),
                ("actor".into(), self.collector.rng.clone()),
                ("replay".into(), self.learner.replay_rng.clone()),
            ],
        };
        save_snapshot(&dir, &meta, self.learner.agent.net(), self.learner.agent.online())?;
        self.snapshots.push(dir.clone());
        Ok(Some(dir))
    }

    /// Runs until the frame budget is spent, then writes the final snapshot
    /// and throughput report.
    pub fn run(&mut self) -> Result<RunSummary> {
        let start = Instant::now();
        while self.iterate()? {}
        self.state.wall_secs += start.elapsed().as_secs_f64();
        self.state.transition_digest = hex::encode(self.hasher.clone().finalize());
        self.save("final")?;
        if let Some(dir) = self.out_dir.as_ref() {
            let path = dir.join("throughput.csv");
            write_bench_csv(&path, &[throughput_report(&self.config, &self.state, "run")])?;
        }
        Ok(RunSummary {
            state: self.state.clone(),
            episodes: self.episodes.clone(),
            snapshots: self.snapshots.clone(),
        })
    }
}

/// Convenience wrapper: set up and run `config`.
pub fn run(config: RunConfig, write_output: bool) -> Result<RunSummary> {
    Trainer::new(config, write_output)?.run()
}

#[cfg(test)]
mod tests;
