//! Fixed-budget evaluation, best-snapshot selection and human-normalized scores.

use std::path::Path;

use rand::SeedableRng;

use crate::agent::{act_batch, ActMode, AgentConfig};
use crate::envs::{EnvKind, EnvRng, Environment, PreprocessConfig, Preprocessed};
use crate::error::{Error, Result};
use crate::network::{QNetwork, Weights};
use crate::trainer::LoadedSnapshot;

/// Longest evaluation episode, in frames.
pub const EPISODE_CAP_FRAMES: u64 = 108_000;
pub const DEFAULT_BUDGET_FRAMES: u64 = 500_000;
pub const RUNNING_AVERAGE_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub snapshot: String,
    pub returns: Vec<f64>,
    /// Frames per episode.
    pub lengths: Vec<u64>,
    pub frames: u64,
}

impl EvalReport {
    pub fn episodes(&self) -> usize {
        self.returns.len()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.returns)
    }

    pub fn median(&self) -> f64 {
        median(&self.returns)
    }

    /// One row per episode: `snapshot,episode,return,frames`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::format(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["snapshot", "episode", "return", "frames"]).map_err(err)?;
        for (i, (r, l)) in self.returns.iter().zip(&self.lengths).enumerate() {
            w.write_record([self.snapshot.clone(), i.to_string(), r.to_string(), l.to_string()])
                .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Plays the greedy, noise-free policy until `budget_frames` are spent; the
/// episode running when the budget runs out is played to its end.
pub fn evaluate(
    snapshot: &str,
    net: &QNetwork,
    weights: &Weights<f32>,
    env: EnvKind,
    preprocess: &PreprocessConfig,
    budget_frames: u64,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_env(snapshot, net, weights, env.make(), preprocess, budget_frames, seed)
}

/// [`evaluate`] on an already-constructed environment.
pub fn evaluate_env(
    snapshot: &str,
    net: &QNetwork,
    weights: &Weights<f32>,
    raw: Box<dyn Environment>,
    preprocess: &PreprocessConfig,
    budget_frames: u64,
    seed: u64,
) -> Result<EvalReport> {
    if raw.num_actions() != net.num_actions() {
        return Err(Error::Input(format!(
            "snapshot has {} actions, {} has {}",
            net.num_actions(),
            raw.name(),
            raw.num_actions()
        )));
    }
    let mut pre = preprocess.clone();
    if pre.time_limit_frames == 0 || pre.time_limit_frames > EPISODE_CAP_FRAMES {
        pre.time_limit_frames = EPISODE_CAP_FRAMES;
    }
    let mut venv = Preprocessed::new(raw, pre, EnvRng::seed_from_u64(seed))?;
    if venv.observation_shape() != net.input_shape() {
        return Err(Error::Input(format!(
            "observation shape {} does not match network input {}",
            venv.observation_shape(),
            net.input_shape()
        )));
    }
    let config = AgentConfig::default();
    let mut rng = EnvRng::seed_from_u64(seed);
    let mut report = EvalReport {
        snapshot: snapshot.to_string(),
        returns: Vec::new(),
        lengths: Vec::new(),
        frames: 0,
    };
    loop {
        let obs = std::slice::from_ref(venv.observation());
        let action = act_batch(net, &config, weights, obs, 0, &mut rng, ActMode::Eval)?[0];
        let step = venv.step(action)?;
        if let Some(ep) = step.episode {
            report.returns.push(ep.episode_return);
            report.lengths.push(ep.frames);
            report.frames += ep.frames;
            if report.frames >= budget_frames {
                return Ok(report);
            }
        }
    }
}

/// Evaluates a loaded snapshot on the environment and preprocessing it was trained with.
pub fn evaluate_snapshot(id: &str, snap: &LoadedSnapshot, budget_frames: u64, seed: u64) -> Result<EvalReport> {
    let cfg = &snap.meta.config;
    evaluate(id, &snap.net, &snap.weights, cfg.env, &cfg.preprocess_config(), budget_frames, seed)
}

/// `100·(agent − random)/(human − random)`.
pub fn hns(game: &str, agent: f64, random: f64, human: f64) -> Result<f64> {
    if human == random {
        return Err(Error::UndefinedScore {
            game: game.to_string(),
            score: human,
        });
    }
    Ok(100.0 * (agent - random) / (human - random))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameScore {
    pub game: String,
    pub random: f64,
    pub human: f64,
    pub agent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    /// Games with HNS strictly above 100.
    pub above_human: usize,
}

pub fn aggregate(hns_values: &[f64]) -> Result<Aggregate> {
    if hns_values.is_empty() {
        return Err(Error::Input("cannot aggregate an empty score table".into()));
    }
    Ok(Aggregate {
        mean: mean(hns_values),
        median: median(hns_values),
        above_human: hns_values.iter().filter(|&&h| h > 100.0).count(),
    })
}

/// Per-game HNS followed by the aggregate.
pub fn score_table(games: &[GameScore]) -> Result<(Vec<f64>, Aggregate)> {
    let values = games
        .iter()
        .map(|g| hns(&g.game, g.agent, g.random, g.human))
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate(&values)?;
    Ok((values, agg))
}

/// Reads `game,random,human,agent` rows.
pub fn read_scores(path: &Path) -> Result<Vec<GameScore>> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(err)?;
        if row.len() != 4 {
            return Err(Error::format(path, format!("expected 4 columns, got {}", row.len())));
        }
        let num = |i: usize| -> Result<f64> {
            row[i]
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("bad number `{}`", &row[i])))
        };
        out.push(GameScore {
            game: row[0].trim().to_string(),
            random: num(1)?,
            human: num(2)?,
            agent: num(3)?,
        });
    }
    Ok(out)
}

pub fn write_hns_table(path: &Path, games: &[GameScore]) -> Result<Aggregate> {
    let (values, agg) = score_table(games)?;
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["game", "random", "human", "agent", "hns"]).map_err(err)?;
    for (g, h) in games.iter().zip(&values) {
        w.write_record([g.game.clone(), g.random.to_string(), g.human.to_string(), g.agent.to_string(), h.to_string()])
            .map_err(err)?;
    }
    w.write_record(["mean", "", "", "", &agg.mean.to_string()]).map_err(err)?;
    w.write_record(["median", "", "", "", &agg.median.to_string()]).map_err(err)?;
    w.write_record(["above_human", "", "", "", &agg.above_human.to_string()])
        .map_err(err)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(agg)
}

/// Element `i` is the mean of `returns[max(0, i+1-window)..=i]`.
pub fn running_average(returns: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(returns.len());
    let mut sum = 0.0;
    for (i, &r) in returns.iter().enumerate() {
        sum += r;
        if i >= window {
            sum -= returns[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Index of the highest mean; the earliest wins ties. `None` when empty.
pub fn select_best(reports: &[EvalReport]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in reports.iter().enumerate() {
        let m = r.mean();
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((i, m));
        }
    }
    best.map(|(i, _)| i)
}

/// First-pass reports, the winner and its fresh re-evaluation.
#[derive(Debug, Clone)]
pub struct Selection {
    pub first_pass: Vec<EvalReport>,
    pub best: usize,
    pub reevaluation: EvalReport,
}

/// Evaluates every snapshot, picks the best and evaluates it again with `reeval_seed`.
pub fn evaluate_and_select(
    snapshots: &[(String, LoadedSnapshot)],
    budget_frames: u64,
    seed: u64,
    reeval_seed: u64,
) -> Result<Selection> {
    let first_pass = snapshots
        .iter()
        .map(|(id, s)| evaluate_snapshot(id, s, budget_frames, seed))
        .collect::<Result<Vec<_>>>()?;
    let best = select_best(&first_pass).ok_or_else(|| Error::Input("no snapshots to evaluate".into()))?;
    let (id, snap) = &snapshots[best];
    let reevaluation = evaluate_snapshot(id, snap, budget_frames, reeval_seed)?;
    Ok(Selection {
        first_pass,
        best,
        reevaluation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(returns: &[f64]) -> EvalReport {
        EvalReport {
            snapshot: String::new(),
            returns: returns.to_vec(),
            lengths: vec![1; returns.len()],
            frames: returns.len() as u64,
        }
    }

    #[test]
    fn hns_pong_row() {
        let v = hns("pong", 21.0, -20.7, 9.3).unwrap();
        assert!((v - 41.7 / 30.0 * 100.0).abs() < 1e-9);
        assert!((v - 139.0).abs() < 1e-9);
    }

    #[test]
    fn hns_endpoints() {
        assert_eq!(hns("g", 5.0, 1.0, 5.0).unwrap(), 100.0);
        assert_eq!(hns("g", 1.0, 1.0, 5.0).unwrap(), 0.0);
        assert!(matches!(hns("g", 1.0, 2.0, 2.0), Err(Error::UndefinedScore { .. })));
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate(&[0.0, 100.0, 200.0]).unwrap();
        assert_eq!((a.mean, a.median, a.above_human), (100.0, 100.0, 1));
        let s = aggregate(&[150.0]).unwrap();
        assert_eq!((s.mean, s.median, s.above_human), (150.0, 150.0, 1));
        assert_eq!(aggregate(&[100.0; 4]).unwrap().above_human, 0);
        assert_eq!(aggregate(&[1.0, 2.0, 3.0, 10.0]).unwrap().median, 2.5);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn running_average_examples() {
        assert_eq!(running_average(&[1.0, 2.0, 3.0], 2), vec![1.0, 1.5, 2.5]);
        assert_eq!(running_average(&[4.0; 150], 100), vec![4.0; 150]);
        assert_eq!(running_average(&[7.0, 1.0], 100)[0], 7.0);
    }

    #[test]
    fn select_best_examples() {
        assert_eq!(select_best(&[report(&[1.0]), report(&[5.0]), report(&[3.0])]), Some(1));
        assert_eq!(select_best(&[report(&[5.0]), report(&[5.0])]), Some(0));
        assert_eq!(select_best(&[]), None);
    }
}
