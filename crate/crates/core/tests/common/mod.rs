#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swiftq::config::RunConfig;
use swiftq::envs::{EnvKind, EnvRng, Environment, PreprocessConfig, Preprocessed, RawFrame, RawStep};
use swiftq::network::{NetworkSpec, QNetwork, SnVariant};
use swiftq::observation::{Frame, Observation, Shape3};
use swiftq::replay::Transition;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A small network covering every layer type.
pub fn small_spec(sn: SnVariant) -> NetworkSpec {
    NetworkSpec {
        base_channels: vec![2, 3],
        channel_multiplier: 1,
        blocks_per_stage: 1,
        sn_variant: sn,
        dueling: true,
        noisy: true,
        sigma0: 0.5,
        hidden_units: 4,
        adaptive_pool: 2,
    }
}

/// Chain run with a tiny network and short budget.
pub fn tiny_chain_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.env = EnvKind::Chain { n: 4 };
    c.base_channels = vec![2, 2, 2];
    c.channel_multiplier = 1;
    c.blocks_per_stage = 1;
    c.hidden_units = 8;
    c.adaptive_pool = 2;
    c.batch_size = 8;
    c.num_envs = 4;
    c.warmup_frames = 40;
    c.total_frames = 400;
    c.replay_capacity = 1_000;
    c.target_sync_frames = 100;
    c.snapshot_period_frames = 0;
    c
}

/// One-frame observation of `values` in `[0,1]`.
pub fn unit_obs(shape: Shape3, values: &[f32]) -> Observation {
    Observation::new(vec![Frame::from_unit(shape, values)])
}

/// Observation tagged by a single byte, for tracking transitions.
pub fn tagged_obs(tag: u8) -> Observation {
    Observation::new(vec![Frame::new(Shape3::new(1, 1, 2), vec![tag, tag.wrapping_mul(7)])])
}

pub fn transition(env_id: usize, tag: u8, next_tag: u8, reward: f32, done: bool, timeout: bool) -> Transition {
    Transition {
        obs: tagged_obs(tag),
        action: tag as usize % 3,
        reward,
        next_obs: tagged_obs(next_tag),
        done,
        timeout,
        env_id,
    }
}

/// Greedy observations of chain states `0..n-1`, produced by walking right
/// through the real preprocessing pipeline.
pub fn chain_state_observations(n: usize) -> Vec<Observation> {
    let env = EnvKind::Chain { n }.make();
    let profile = env.profile();
    let mut p = Preprocessed::new(env, profile, EnvRng::seed_from_u64(0)).unwrap();
    let mut out = vec![p.observation().clone()];
    for _ in 0..n.saturating_sub(2) {
        let step = p.step(1).unwrap();
        assert!(step.episode.is_none());
        out.push(step.obs);
    }
    out
}

/// Optimal chain action by hand: moving right reaches the reward in
/// `n-1-s` steps, moving left delays it by two more, so with `γ < 1` right
/// always wins.
pub fn chain_oracle_action(_state: usize) -> usize {
    1
}

/// Never terminates; the frame shows a step counter parity.
pub struct Endless {
    t: u64,
}

impl Endless {
    pub fn new() -> Self {
        Self { t: 0 }
    }

    fn frame(&self) -> RawFrame {
        RawFrame::new(1, 1, 2, vec![(self.t % 2) as f32, 1.0])
    }
}

impl Environment for Endless {
    fn name(&self) -> &str {
        "endless"
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn raw_shape(&self) -> (usize, usize, usize) {
        (1, 1, 2)
    }

    fn profile(&self) -> PreprocessConfig {
        PreprocessConfig {
            grayscale: false,
            frame_skip: 4,
            frame_stack: 1,
            height: 1,
            width: 1,
            max_pool: false,
            noop_max: 0,
            time_limit_frames: 0,
        }
    }

    fn reset(&mut self, _rng: &mut EnvRng) -> RawFrame {
        self.t = 0;
        self.frame()
    }

    fn step(&mut self, _action: usize, _rng: &mut EnvRng) -> RawStep {
        self.t += 1;
        RawStep {
            frame: self.frame(),
            reward: 1.0,
            done: false,
            truncated: false,
            info: Vec::new(),
        }
    }
}

/// Network for a `1×1×channels` input.
pub fn point_network(channels: usize, actions: usize) -> QNetwork {
    QNetwork::build(&small_spec(SnVariant::All), Shape3::new(channels, 1, 1), actions).unwrap()
}

pub fn random_unit_batch(r: &mut impl Rng, shape: Shape3, batch: usize) -> Vec<Observation> {
    (0..batch)
        .map(|_| {
            let v: Vec<f32> = (0..shape.len()).map(|_| r.random::<f32>()).collect();
            unit_obs(shape, &v)
        })
        .collect()
}

/// Outcome of a finite-difference gradient check at one evaluation point.
pub struct FdCheck {
    pub params: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Checks backprop of `L = Σ c ⊙ Q` against central differences with step `h`
/// over every parameter, at a point drawn from `seed`. The noise draw and
/// `σ̂` are frozen. Returns `None` when some parameter's left and right slopes
/// disagree, i.e. a ReLU or max-pool kink lies within `±h` and the central
/// difference is no oracle at that point.
pub fn fd_check(net: &QNetwork, seed: u64, batch: usize, h: f64) -> Option<FdCheck> {
    use rand_distr::{Distribution, StandardNormal};
    use swiftq::network::Weights;

    let mut r = rng(seed);
    let shape = net.input_shape();
    let actions = net.num_actions();
    let mut store = net.init::<f64, _>(&mut r);
    let noise = net.sample_noise::<f64, _>(&mut r);
    let x: Vec<f64> = (0..batch * shape.len()).map(|_| r.random::<f64>()).collect();
    let c: Vec<f64> = (0..batch * actions).map(|_| StandardNormal.sample(&mut r)).collect();
    let q = net.forward_train(&mut store, &x, batch, Some(&noise)).unwrap();
    net.backward(&mut store, &c).unwrap();
    let loss = |w: &Weights<f64>| -> f64 {
        let q = net.forward(w, &x, batch, Some(&noise)).unwrap();
        q.iter().zip(&c).map(|(a, b)| a * b).sum()
    };
    let base = loss(&store.online);
    let trained: f64 = q.iter().zip(&c).map(|(a, b)| a * b).sum();
    assert!((base - trained).abs() <= 1e-12 * (1.0 + base.abs()), "training and evaluation forward disagree");

    let mut w = store.online.clone();
    let mut out = FdCheck {
        params: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for (pi, info) in net.params().iter().enumerate() {
        for j in 0..w.tensors[pi].data.len() {
            let orig = w.tensors[pi].data[j];
            w.tensors[pi].data[j] = orig + h;
            let up = loss(&w);
            w.tensors[pi].data[j] = orig - h;
            let down = loss(&w);
            w.tensors[pi].data[j] = orig;
            // within one linear region the loss is affine in a single weight
            let (right, left) = ((up - base) / h, (base - down) / h);
            if (right - left).abs() > 1e-6 * right.abs().max(left.abs()).max(1.0) {
                return None;
            }
            let numeric = (up - down) / (2.0 * h);
            let analytic = store.grads[pi].data[j];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = format!("{}[{j}]", info.name);
            }
            out.params += 1;
        }
    }
    Some(out)
}

/// First kink-free evaluation point among `seeds`, with the number of points rejected.
pub fn fd_check_smooth(net: &QNetwork, seeds: std::ops::Range<u64>, batch: usize, h: f64) -> Option<(FdCheck, u64)> {
    let start = seeds.start;
    seeds.into_iter().find_map(|s| fd_check(net, s, batch, h).map(|c| (c, s - start)))
}
