//! Command-line front end. [`main`] returns the process exit code:
//! 0 on success, 1 on invalid input or configuration, 2 on runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{ablate, report_paths, AblationGrid, DEFAULT_SEEDS};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_and_select, read_scores, write_hns_table, DEFAULT_BUDGET_FRAMES};
use crate::network::SnVariant;
use crate::plot::{frame_grid, learning_curve, read_episodes, resample, write_curves_csv, write_svg};
use crate::trainer::{self, load_snapshot, run_bench, write_bench_csv};

#[derive(Parser, Debug)]
#[command(name = "swiftq", version, about = "Fast single-machine value-based deep RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run and write its directory.
    Train(ConfigArgs),
    /// Evaluate snapshots under a fixed frame budget.
    Eval(EvalArgs),
    /// Learning curves of a run, plus an optional normalized-score table.
    Plot(PlotArgs),
    /// Throughput of the cumulative modification stack.
    Bench(BenchArgs),
    /// Channel multiplier × spectral-norm grid over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    total_frames: Option<u64>,
    /// none | all | last
    #[arg(long)]
    sn: Option<String>,
    #[arg(long)]
    channel_multiplier: Option<usize>,
    /// serial | overlap
    #[arg(long)]
    mode: Option<String>,
    /// huber | mse
    #[arg(long)]
    loss: Option<String>,
    /// Any config key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Snapshot directory; repeat to pick the best and re-evaluate it.
    #[arg(long, required_unless_present = "run")]
    snapshot: Vec<PathBuf>,
    /// Evaluate every snapshot of a run directory.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BUDGET_FRAMES)]
    budget: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report CSV; defaults to `eval.csv` next to the first snapshot.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    run: PathBuf,
    /// `game,random,human,agent` CSV; writes `hns_table.csv` into the run.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    points: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Frames per configuration.
    #[arg(long, default_value_t = 200_000)]
    frames: u64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 4])]
    multipliers: Vec<usize>,
    #[arg(long = "sn-variants", value_delimiter = ',', default_values_t = vec![SnVariant::None, SnVariant::All, SnVariant::Last])]
    sn_variants: Vec<SnVariant>,
    #[arg(long, default_value_t = DEFAULT_SEEDS)]
    seeds: usize,
    /// Runs in flight at once.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl ConfigArgs {
    /// File, then `SWIFTQ_*` variables, then flags. A key given twice on the
    /// command line with different values is an error.
    fn resolve(&self, lookup: impl Fn(&str) -> Option<String>) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        config.apply_env(lookup)?;

        let mut overrides: Vec<(String, String, String)> = Vec::new();
        let named = [
            ("env", self.env.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("out_dir", self.out.as_ref().map(|p| p.display().to_string())),
            ("total_frames", self.total_frames.map(|v| v.to_string())),
            ("sn", self.sn.clone()),
            ("channel_multiplier", self.channel_multiplier.map(|v| v.to_string())),
            ("mode", self.mode.clone()),
            ("loss", self.loss.clone()),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                overrides.push((key.to_string(), v, format!("--{}", key.replace('_', "-"))));
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string(), format!("--set {kv}")));
        }
        for (i, (k, v, src)) in overrides.iter().enumerate() {
            if let Some((_, v2, src2)) = overrides[..i].iter().find(|(k2, _, _)| k2 == k) {
                if v2 != v {
                    return Err(Error::Config(format!("conflicting values for `{k}`: {src2} and {src}")));
                }
            }
        }
        for (k, v, _) in &overrides {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }
}

fn env_lookup(key: &str) -> Option<String> {
    std::env::var(key).ok()
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) => 1,
        _ => 2,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Plot(args) => cmd_plot(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::Ablate(args) => cmd_ablate(&args),
    }
}

fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let config = args.resolve(env_lookup)?;
    let out = config.out_dir.clone();
    let summary = trainer::run(config, true)?;
    let s = &summary.state;
    println!(
        "{}: {} frames, {} train steps, {} episodes, {:.1} frames/s",
        out.display(),
        s.frames,
        s.train_steps,
        s.episodes,
        s.frames_per_sec()
    );
    Ok(())
}

fn snapshot_dirs(run: &Path) -> Result<Vec<PathBuf>> {
    let root = run.join("snapshots");
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.txt").is_file())
        .collect();
    // frame_* sort by frame; `final` after them, `crash` excluded
    dirs.retain(|p| p.file_name().is_some_and(|n| n != "crash"));
    dirs.sort_by_key(|p| {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        (name == "final", name)
    });
    if dirs.is_empty() {
        return Err(Error::Input(format!("no snapshots under {}", root.display())));
    }
    Ok(dirs)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut dirs = args.snapshot.clone();
    if let Some(run) = &args.run {
        dirs.extend(snapshot_dirs(run)?);
    }
    let snaps = dirs
        .iter()
        .map(|d| Ok((d.display().to_string(), load_snapshot(d)?)))
        .collect::<Result<Vec<_>>>()?;
    let sel = evaluate_and_select(&snaps, args.budget, args.seed, args.seed.wrapping_add(1))?;
    let out = match &args.out {
        Some(p) => p.clone(),
        None => dirs[0].parent().unwrap_or(Path::new(".")).join("eval.csv"),
    };
    write_selection(&out, &sel)?;
    for r in &sel.first_pass {
        println!("{}: {} episodes, mean {:.4}, median {:.4}, {} frames", r.snapshot, r.episodes(), r.mean(), r.median(), r.frames);
    }
    if sel.first_pass.len() > 1 {
        println!("best: {} (re-evaluated mean {:.4})", sel.reevaluation.snapshot, sel.reevaluation.mean());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn write_selection(path: &Path, sel: &crate::eval::Selection) -> Result<()> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["pass", "snapshot", "episode", "return", "frames"]).map_err(err)?;
    let passes = sel.first_pass.iter().map(|r| ("first", r)).chain(
        (sel.first_pass.len() > 1).then_some(("reevaluation", &sel.reevaluation)),
    );
    for (pass, r) in passes {
        for (i, (ret, len)) in r.returns.iter().zip(&r.lengths).enumerate() {
            w.write_record([pass.to_string(), r.snapshot.clone(), i.to_string(), ret.to_string(), len.to_string()])
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn cmd_plot(args: &PlotArgs) -> Result<()> {
    let config = RunConfig::load(&args.run.join("config.txt"))?;
    let episodes = read_episodes(&args.run.join("episodes.csv"))?;
    let grid = frame_grid(config.total_frames, args.points);
    let label = config.env.to_string();
    let series = vec![(label.clone(), resample(&learning_curve(&episodes), &grid))];
    let stem = label.replace(':', "_");
    let csv = args.run.join(format!("curve_{stem}.csv"));
    let svg = args.run.join(format!("curve_{stem}.svg"));
    write_curves_csv(&csv, &grid, &series)?;
    write_svg(&svg, &format!("{label}: 100-episode running average"), &grid, &series)?;
    println!("wrote {} and {}", csv.display(), svg.display());
    if let Some(scores) = &args.scores {
        let table = args.run.join("hns_table.csv");
        let agg = write_hns_table(&table, &read_scores(scores)?)?;
        println!(
            "mean HNS {:.1}, median HNS {:.1}, above human {} -> {}",
            agg.mean,
            agg.median,
            agg.above_human,
            table.display()
        );
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let config = args.config.resolve(env_lookup)?;
    let rows = run_bench(&config, args.frames)?;
    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let path = config.out_dir.join("bench.csv");
    write_bench_csv(&path, &rows)?;
    for r in &rows {
        println!(
            "{:<14} b={:<4} e={:<3} k={:<8} {:<8} {:>10.1} frames/s {:>10.1} samples/s x{:.2}",
            r.label, r.batch_size, r.num_envs, r.train_steps_per_vector_step, r.mode, r.frames_per_sec, r.samples_per_sec, r.speedup
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let config = args.config.resolve(env_lookup)?;
    let grid = AblationGrid {
        multipliers: args.multipliers.clone(),
        sn: args.sn_variants.clone(),
        seeds: args.seeds,
    };
    let report = ablate(&config, &grid, args.jobs, &config.out_dir)?;
    for c in &report.cells {
        println!("{:<16} final median return {:.4}", c.label, c.final_median());
    }
    for p in report_paths(&config.out_dir) {
        println!("wrote {}", p.display());
    }
    Ok(())
}
