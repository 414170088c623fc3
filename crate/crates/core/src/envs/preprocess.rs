//! Frame preprocessing and the per-environment wrapper that applies frame
//! skipping, no-op starts, stacking and the time limit.

use std::collections::VecDeque;

use rand::Rng;

use super::{EnvRng, EnvStep, Environment, EpisodeStats, PreprocessConfig, RawFrame};
use crate::error::{Error, Result};
use crate::observation::{Frame, Observation, Shape3};

/// ITU-R 601 luminance weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Source-index weights of each output cell when `src` cells are averaged into `dst`.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let mut w = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)) / scale;
                if overlap > 0.0 {
                    w.push((i, overlap as f32));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Area-interpolation resize of channel-first planes `[C][H][W]`.
///
/// Each output pixel is the mean of the source region it covers, with
/// fractional coverage at the borders.
pub fn area_resize(src: &[f32], channels: usize, height: usize, width: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(src.len(), channels * height * width);
    if (height, width) == (out_h, out_w) {
        return src.to_vec();
    }
    let wx = area_weights(width, out_w);
    let wy = area_weights(height, out_h);
    let mut out = vec![0.0f32; channels * out_h * out_w];
    let mut rows = vec![0.0f32; height * out_w];
    for c in 0..channels {
        let plane = &src[c * height * width..(c + 1) * height * width];
        for y in 0..height {
            let line = &plane[y * width..(y + 1) * width];
            for (ox, ws) in wx.iter().enumerate() {
                rows[y * out_w + ox] = ws.iter().map(|&(i, w)| line[i] * w).sum();
            }
        }
        let dst = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
        for (oy, ws) in wy.iter().enumerate() {
            for ox in 0..out_w {
                dst[oy * out_w + ox] = ws.iter().map(|&(i, w)| rows[i * out_w + ox] * w).sum();
            }
        }
    }
    out
}

/// Turns the last raw frame (and, when max pooling, the one before it) into a
/// channel-first frame in `[0,1]` at the configured resolution.
pub fn preprocess_frame(prev: Option<&RawFrame>, cur: &RawFrame, config: &PreprocessConfig) -> Vec<f32> {
    let pooled: Vec<f32> = match prev {
        Some(p) if config.max_pool => {
            assert_eq!(p.data.len(), cur.data.len(), "consecutive raw frames differ in shape");
            p.data.iter().zip(&cur.data).map(|(a, b)| a.max(*b)).collect()
        }
        _ => cur.data.clone(),
    };
    let (h, w, c) = (cur.height, cur.width, cur.channels);
    let out_c = config.frame_channels(c);
    let mut planar = vec![0.0f32; out_c * h * w];
    if out_c == 1 && c == 3 {
        for (dst, px) in planar.iter_mut().zip(pooled.chunks(3)) {
            *dst = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
        }
    } else {
        for (p, px) in pooled.chunks(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                planar[ch * h * w + p] = v;
            }
        }
    }
    let mut out = area_resize(&planar, out_c, h, w, config.height, config.width);
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

/// A single environment behind the full preprocessing pipeline.
pub struct Preprocessed<E> {
    env: E,
    config: PreprocessConfig,
    rng: EnvRng,
    frame_shape: Shape3,
    stack: VecDeque<Frame>,
    current: Observation,
    last_raw: Option<RawFrame>,
    episode_frames: u64,
    episode_return: f64,
    episode_len: u64,
    last_noops: usize,
}

impl<E: Environment> Preprocessed<E> {
    /// Wraps `env` and starts its first episode.
    pub fn new(env: E, config: PreprocessConfig, rng: EnvRng) -> Result<Self> {
        config.validate()?;
        let (_, _, c) = env.raw_shape();
        let frame_shape = Shape3::new(config.frame_channels(c), config.height, config.width);
        let placeholder = Frame::new(frame_shape, vec![0; frame_shape.len()]);
        let mut this = Self {
            env,
            config,
            rng,
            frame_shape,
            stack: VecDeque::new(),
            current: Observation::new(vec![placeholder]),
            last_raw: None,
            episode_frames: 0,
            episode_return: 0.0,
            episode_len: 0,
            last_noops: 0,
        };
        this.reset_episode();
        Ok(this)
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn config(&self) -> &PreprocessConfig {
        &self.config
    }

    pub fn observation(&self) -> &Observation {
        &self.current
    }

    pub fn observation_shape(&self) -> Shape3 {
        Shape3::new(
            self.frame_shape.channels * self.config.frame_stack,
            self.frame_shape.height,
            self.frame_shape.width,
        )
    }

    pub fn num_actions(&self) -> usize {
        self.env.num_actions()
    }

    /// No-ops executed at the start of the current episode.
    pub fn last_noops(&self) -> usize {
        self.last_noops
    }

    /// Raw frames elapsed in the current episode, no-ops included.
    pub fn episode_frames(&self) -> u64 {
        self.episode_frames
    }

    fn frame(&self, prev: Option<&RawFrame>, cur: &RawFrame) -> Frame {
        Frame::from_unit(self.frame_shape, &preprocess_frame(prev, cur, &self.config))
    }

    fn reset_episode(&mut self) {
        let mut raw = self.env.reset(&mut self.rng);
        let mut prev = None;
        self.episode_frames = 0;
        self.episode_return = 0.0;
        self.episode_len = 0;
        let k = if self.config.noop_max > 0 {
            self.rng.random_range(0..=self.config.noop_max)
        } else {
            0
        };
        let noop = self.env.noop_action();
        for _ in 0..k {
            let s = self.env.step(noop, &mut self.rng);
            self.episode_frames += 1;
            if s.done || s.truncated {
                raw = self.env.reset(&mut self.rng);
                prev = None;
            } else {
                prev = Some(std::mem::replace(&mut raw, s.frame));
            }
        }
        self.last_noops = k;
        let first = self.frame(prev.as_ref(), &raw);
        self.last_raw = Some(raw);
        self.stack = std::iter::repeat_n(first, self.config.frame_stack).collect();
        self.current = Observation::new(self.stack.iter().cloned().collect());
    }

    /// Advances `frame_skip` raw frames with `action`, auto-resetting at episode end.
    pub fn step(&mut self, action: usize) -> Result<EnvStep> {
        let actions = self.env.num_actions();
        if action >= actions {
            return Err(Error::Input(format!("action {action} out of range ({actions} actions)")));
        }
        let mut reward = 0.0;
        let mut done = false;
        let mut truncated = false;
        let mut info = Vec::new();
        let mut prev = self.last_raw.take();
        let mut cur = prev.clone().expect("an episode is running");
        let limit = self.config.time_limit_frames;
        for _ in 0..self.config.frame_skip {
            let s = self.env.step(action, &mut self.rng);
            self.episode_frames += 1;
            if !s.reward.is_finite() {
                return Err(Error::NonFinite(format!("{} returned reward {}", self.env.name(), s.reward)));
            }
            reward += s.reward;
            info.extend(s.info);
            prev = Some(std::mem::replace(&mut cur, s.frame));
            done = s.done;
            truncated = s.truncated;
            if done || truncated || (limit > 0 && self.episode_frames >= limit) {
                break;
            }
        }
        let timeout = !done && (truncated || (limit > 0 && self.episode_frames >= limit));
        let frame = self.frame(prev.as_ref(), &cur);
        self.last_raw = Some(cur);
        self.stack.pop_front();
        self.stack.push_back(frame);
        let next_obs = Observation::new(self.stack.iter().cloned().collect());
        self.episode_return += reward;
        self.episode_len += 1;
        let episode = (done || timeout).then_some(EpisodeStats {
            episode_return: self.episode_return,
            length: self.episode_len,
            frames: self.episode_frames,
        });
        if episode.is_some() {
            self.reset_episode();
        } else {
            self.current = next_obs.clone();
        }
        Ok(EnvStep {
            obs: self.current.clone(),
            next_obs,
            reward,
            done,
            timeout,
            episode,
            info,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identical_frames_pool_to_themselves() {
        let f = RawFrame::new(1, 2, 1, vec![0.25, 0.75]);
        let config = PreprocessConfig {
            grayscale: false,
            height: 1,
            width: 2,
            ..PreprocessConfig::gym()
        };
        assert_eq!(preprocess_frame(Some(&f), &f, &config), vec![0.25, 0.75]);
    }

    #[test]
    fn max_pool_takes_elementwise_max() {
        let a = RawFrame::new(1, 2, 1, vec![0.25, 0.5]);
        let b = RawFrame::new(1, 2, 1, vec![0.5, 0.0]);
        let config = PreprocessConfig {
            height: 1,
            width: 2,
            ..PreprocessConfig::gym()
        };
        assert_eq!(preprocess_frame(Some(&a), &b, &config), vec![0.5, 0.5]);
        let no_pool = PreprocessConfig {
            max_pool: false,
            ..config
        };
        assert_eq!(preprocess_frame(Some(&a), &b, &no_pool), vec![0.5, 0.0]);
    }

    #[test]
    fn white_pixel_is_full_luminance() {
        let f = RawFrame::new(1, 1, 3, vec![1.0, 1.0, 1.0]);
        let config = PreprocessConfig {
            height: 1,
            width: 1,
            ..PreprocessConfig::gym()
        };
        let g = preprocess_frame(None, &f, &config);
        assert!((g[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn area_resize_averages_block() {
        assert_eq!(area_resize(&[0.0, 0.5, 0.5, 1.0], 1, 2, 2, 1, 1), vec![0.5]);
    }

    #[test]
    fn area_resize_fractional_coverage() {
        // 3 → 2: each output covers 1.5 source cells.
        let out = area_resize(&[0.0, 0.3, 0.9], 1, 1, 3, 1, 2);
        assert!((out[0] - (0.0 + 0.5 * 0.3) / 1.5).abs() < 1e-6);
        assert!((out[1] - (0.5 * 0.3 + 0.9) / 1.5).abs() < 1e-6);
    }

    #[test]
    fn area_resize_preserves_mean_on_integer_ratio() {
        let src: Vec<f32> = (0..8 * 8).map(|i| (i % 7) as f32 / 7.0).collect();
        let out = area_resize(&src, 1, 8, 8, 4, 2);
        let mean_in = src.iter().sum::<f32>() / 64.0;
        let mean_out = out.iter().sum::<f32>() / 8.0;
        assert!((mean_in - mean_out).abs() < 1e-5);
    }

    /// Counts frames; reward 1 each raw step, terminates after `len` steps.
    struct Counter {
        len: usize,
        t: usize,
    }

    impl Environment for Counter {
        fn name(&self) -> &str {
            "counter"
        }
        fn num_actions(&self) -> usize {
            2
        }
        fn raw_shape(&self) -> (usize, usize, usize) {
            (1, 1, 1)
        }
        fn profile(&self) -> PreprocessConfig {
            PreprocessConfig {
                grayscale: false,
                frame_skip: 4,
                frame_stack: 3,
                height: 1,
                width: 1,
                max_pool: false,
                noop_max: 0,
                time_limit_frames: 0,
            }
        }
        fn reset(&mut self, _rng: &mut EnvRng) -> RawFrame {
            self.t = 0;
            RawFrame::new(1, 1, 1, vec![0.0])
        }
        fn step(&mut self, _action: usize, _rng: &mut EnvRng) -> RawStep {
            self.t += 1;
            RawStep {
                frame: RawFrame::new(1, 1, 1, vec![self.t as f32 / 100.0]),
                reward: 1.0,
                done: self.t >= self.len,
                truncated: false,
                info: Vec::new(),
            }
        }
    }

    use super::super::RawStep;

    fn wrapped(len: usize, config: PreprocessConfig) -> Preprocessed<Counter> {
        Preprocessed::new(Counter { len, t: 0 }, config, EnvRng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn skip_sums_rewards_and_stack_repeats_first_frame() {
        let env = Counter { len: 100, t: 0 };
        let config = env.profile();
        let mut p = wrapped(100, config);
        let first = p.observation().clone();
        assert_eq!(first.frames().len(), 3);
        assert!(first.frames().iter().all(|f| f == &first.frames()[0]));
        let s = p.step(1).unwrap();
        assert_eq!(s.reward, 4.0);
        assert_eq!(s.next_obs.frames()[2].bytes(), &[Frame::from_unit(Shape3::new(1, 1, 1), &[0.04]).bytes()[0]]);
        assert_eq!(s.next_obs.frames()[0], first.frames()[0]);
    }

    #[test]
    fn terminal_inside_skip_stops_early_and_resets() {
        let mut p = wrapped(6, Counter { len: 6, t: 0 }.profile());
        let s = p.step(0).unwrap();
        assert!(!s.done);
        let s = p.step(0).unwrap();
        assert!(s.done && !s.timeout);
        assert_eq!(s.reward, 2.0);
        let ep = s.episode.unwrap();
        assert_eq!((ep.episode_return, ep.length, ep.frames), (6.0, 2, 6));
        assert_ne!(s.obs, s.next_obs);
        assert_eq!(p.episode_frames(), 0);
    }

    #[test]
    fn time_limit_sets_timeout_not_done() {
        let config = PreprocessConfig {
            time_limit_frames: 10,
            ..Counter { len: 0, t: 0 }.profile()
        };
        let mut p = wrapped(1000, config);
        let mut steps = Vec::new();
        for _ in 0..3 {
            steps.push(p.step(0).unwrap());
        }
        assert!(!steps[1].timeout);
        assert!(steps[2].timeout && !steps[2].done);
        assert_eq!(steps[2].reward, 2.0);
        assert_eq!(steps[2].episode.unwrap().frames, 10);
    }

    #[test]
    fn invalid_action_is_input_error() {
        let mut p = wrapped(10, Counter { len: 10, t: 0 }.profile());
        assert!(matches!(p.step(2), Err(Error::Input(_))));
    }

    #[test]
    fn noop_counts_stay_in_range() {
        let config = PreprocessConfig {
            noop_max: 30,
            ..Counter { len: 0, t: 0 }.profile()
        };
        let mut p = wrapped(1_000_000, config);
        let mut seen = [false; 31];
        for _ in 0..2000 {
            seen[p.last_noops()] = true;
            p.reset_episode();
        }
        assert!(seen.iter().all(|&s| s));
    }
}
