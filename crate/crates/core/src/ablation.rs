//! Grid runs over channel multiplier × spectral-normalization variant.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::network::SnVariant;
use crate::plot::{frame_grid, learning_curve, median_curve, resample, write_curves_csv, write_svg};
use crate::trainer::{self, RunSummary};

pub const DEFAULT_SEEDS: usize = 3;
pub const CURVE_POINTS: usize = 50;

#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub multipliers: Vec<usize>,
    pub sn: Vec<SnVariant>,
    pub seeds: usize,
}

impl AblationGrid {
    /// Cross product in multiplier-major order.
    pub fn cells(&self) -> Result<Vec<(usize, SnVariant)>> {
        if self.multipliers.is_empty() || self.sn.is_empty() || self.seeds == 0 {
            return Err(Error::Config("ablation grid is empty".into()));
        }
        Ok(self
            .multipliers
            .iter()
            .flat_map(|&m| self.sn.iter().map(move |&s| (m, s)))
            .collect())
    }

    pub fn run_count(&self) -> Result<usize> {
        Ok(self.cells()?.len() * self.seeds)
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub label: String,
    pub multiplier: usize,
    pub sn: SnVariant,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunSummary>,
    /// Median over seeds of the running-average return, on [`AblationReport::grid`].
    pub median_curve: Vec<f64>,
}

impl CellResult {
    pub fn final_median(&self) -> f64 {
        self.median_curve.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub grid: Vec<u64>,
    pub cells: Vec<CellResult>,
}

pub fn cell_label(multiplier: usize, sn: SnVariant) -> String {
    format!("m{multiplier}_sn-{sn}")
}

/// Runs every cell for seeds `base.seed ..`, at most `jobs` at a time, under
/// `out/<cell>/seed<k>`, then writes `ablation_curves.csv`, `ablation.csv`
/// and `ablation.svg` into `out`.
pub fn ablate(base: &RunConfig, grid: &AblationGrid, jobs: usize, out: &Path) -> Result<AblationReport> {
    let cells = grid.cells()?;
    let seeds: Vec<u64> = (0..grid.seeds as u64).map(|i| base.seed + i).collect();
    let mut work: Vec<(usize, usize, RunConfig)> = Vec::new();
    for (ci, &(m, sn)) in cells.iter().enumerate() {
        for (si, &seed) in seeds.iter().enumerate() {
            let mut c = base.clone();
            c.channel_multiplier = m;
            c.sn = sn;
            c.seed = seed;
            c.out_dir = out.join(cell_label(m, sn)).join(format!("seed{seed}"));
            c.validate()?;
            work.push((ci, si, c));
        }
    }

    let queue = Mutex::new(work.into_iter().rev().collect::<Vec<_>>());
    let results: Mutex<Vec<(usize, usize, Result<RunSummary>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1) {
            scope.spawn(|| loop {
                let Some((ci, si, c)) = queue.lock().expect("queue poisoned").pop() else {
                    break;
                };
                let r = trainer::run(c, true);
                results.lock().expect("results poisoned").push((ci, si, r));
            });
        }
    });

    let mut slots: Vec<Vec<Option<RunSummary>>> = vec![vec![None; seeds.len()]; cells.len()];
    for (ci, si, r) in results.into_inner().expect("results poisoned") {
        slots[ci][si] = Some(r?);
    }
    let frame_grid = frame_grid(base.total_frames, CURVE_POINTS);
    let cells: Vec<CellResult> = cells
        .iter()
        .zip(slots)
        .map(|(&(m, sn), runs)| {
            let runs: Vec<RunSummary> = runs.into_iter().map(|r| r.expect("every run reports")).collect();
            let curves: Vec<Vec<f64>> = runs
                .iter()
                .map(|r| resample(&learning_curve(&r.episodes), &frame_grid))
                .collect();
            CellResult {
                label: cell_label(m, sn),
                multiplier: m,
                sn,
                seeds: seeds.clone(),
                runs,
                median_curve: median_curve(&curves),
            }
        })
        .collect();
    let report = AblationReport { grid: frame_grid, cells };
    write_report(&report, out)?;
    Ok(report)
}

pub fn report_paths(out: &Path) -> [PathBuf; 3] {
    [out.join("ablation_curves.csv"), out.join("ablation.csv"), out.join("ablation.svg")]
}

fn write_report(report: &AblationReport, out: &Path) -> Result<()> {
    let [curves, table, svg] = report_paths(out);
    let series: Vec<(String, Vec<f64>)> = report
        .cells
        .iter()
        .map(|c| (c.label.clone(), c.median_curve.clone()))
        .collect();
    write_curves_csv(&curves, &report.grid, &series)?;
    write_svg(&svg, "median running-average return", &report.grid, &series)?;

    let err = |e: csv::Error| Error::format(&table, e.to_string());
    let mut w = csv::Writer::from_path(&table).map_err(err)?;
    w.write_record(["cell", "channel_multiplier", "sn", "seeds", "final_median_return", "median_frames_per_sec"])
        .map_err(err)?;
    for c in &report.cells {
        let mut fps: Vec<f64> = c.runs.iter().map(|r| r.state.frames_per_sec()).collect();
        fps.sort_by(f64::total_cmp);
        w.write_record([
            c.label.clone(),
            c.multiplier.to_string(),
            c.sn.to_string(),
            c.seeds.len().to_string(),
            c.final_median().to_string(),
            fps.get(fps.len() / 2).map_or(String::new(), |x| format!("{x:.3}")),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&table, e))
}
