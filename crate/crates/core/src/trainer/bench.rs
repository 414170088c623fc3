//! Throughput of the cumulative modification stack at a fixed replay ratio.

use std::path::Path;

use super::{Mode, RunState, Trainer};
use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputRow {
    pub label: String,
    pub batch_size: usize,
    pub num_envs: usize,
    pub train_steps_per_vector_step: f64,
    pub mode: Mode,
    pub replay_ratio: f64,
    pub frames_per_sec: f64,
    pub samples_per_sec: f64,
    /// Frames/sec relative to the first row of the stack.
    pub speedup: f64,
}

impl ThroughputRow {
    pub fn header() -> [&'static str; 9] {
        [
            "label",
            "batch_size",
            "num_envs",
            "k",
            "mode",
            "replay_ratio",
            "frames_per_sec",
            "samples_per_sec",
            "speedup",
        ]
    }

    pub fn fields(&self) -> [String; 9] {
        [
            self.label.clone(),
            self.batch_size.to_string(),
            self.num_envs.to_string(),
            self.train_steps_per_vector_step.to_string(),
            self.mode.to_string(),
            self.replay_ratio.to_string(),
            format!("{:.3}", self.frames_per_sec),
            format!("{:.3}", self.samples_per_sec),
            format!("{:.4}", self.speedup),
        ]
    }
}

/// Row for a finished run; `speedup` is left at 1.
pub fn throughput_report(config: &RunConfig, state: &RunState, label: &str) -> ThroughputRow {
    let schedule = config.schedule();
    ThroughputRow {
        label: label.to_string(),
        batch_size: schedule.batch_size,
        num_envs: schedule.num_envs,
        train_steps_per_vector_step: schedule.train_steps_per_vector_step,
        mode: config.mode,
        replay_ratio: schedule.replay_ratio(),
        frames_per_sec: state.frames_per_sec(),
        samples_per_sec: state.samples_per_sec(),
        speedup: 1.0,
    }
}

/// The four cumulative configurations, all at replay ratio 8:
/// baseline (b=32, e=1, k=1/4), then batch 256 (k=1/32), then 64 envs
/// (k=2), then overlapped collection.
pub fn modification_stack(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with = |b: usize, e: usize, k: f64, mode: Mode| {
        let mut c = base.clone();
        c.batch_size = b;
        c.num_envs = e;
        c.train_steps_per_vector_step = k;
        c.mode = mode;
        c
    };
    vec![
        ("baseline".into(), with(32, 1, 0.25, Mode::Serial)),
        ("+batch256".into(), with(256, 1, 1.0 / 32.0, Mode::Serial)),
        ("+vector_envs".into(), with(256, 64, 2.0, Mode::Serial)),
        ("+overlap".into(), with(256, 64, 2.0, Mode::Overlap)),
    ]
}

/// Runs every stack entry for `total_frames` without writing output.
pub fn run_bench(base: &RunConfig, total_frames: u64) -> Result<Vec<ThroughputRow>> {
    let mut rows: Vec<ThroughputRow> = Vec::new();
    for (label, mut config) in modification_stack(base) {
        config.total_frames = total_frames;
        config.snapshot_period_frames = 0;
        let mut trainer = Trainer::new(config.clone(), false)?;
        let summary = trainer.run()?;
        let mut row = throughput_report(&config, &summary.state, &label);
        if let Some(first) = rows.first() {
            row.speedup = if first.frames_per_sec > 0.0 {
                row.frames_per_sec / first.frames_per_sec
            } else {
                0.0
            };
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[ThroughputRow]) -> Result<()> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(ThroughputRow::header()).map_err(err)?;
    for r in rows {
        w.write_record(r.fields()).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
