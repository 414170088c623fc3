//! Catch on a small grid, rendered as pixels.

use rand::Rng;

use super::{EnvRng, Environment, PreprocessConfig, RawFrame, RawStep};

const GRID: usize = 21;
const SCALE: usize = 4;
const BALLS: usize = 10;
const BALL_PIXEL: f32 = 1.0;
const PADDLE_PIXEL: f32 = 0.6;

/// A ball falls one row per step from a uniformly random column of a 21×21
/// grid; a width-3 paddle on the bottom row moves left, stays or moves right.
/// A catch pays +1 and a miss −1; the episode ends after ten balls. Frames are
/// the grid upscaled ×4 (nearest neighbour) to 84×84, one channel.
#[derive(Debug, Clone)]
pub struct MiniCatch {
    ball_row: usize,
    ball_col: usize,
    /// Paddle centre, kept in `1..=GRID−2`.
    paddle: usize,
    balls_done: usize,
}

impl Default for MiniCatch {
    fn default() -> Self {
        Self::new()
    }
}

impl MiniCatch {
    pub const GRID: usize = GRID;
    pub const BALLS: usize = BALLS;

    pub fn new() -> Self {
        Self {
            ball_row: 0,
            ball_col: GRID / 2,
            paddle: GRID / 2,
            balls_done: 0,
        }
    }

    pub fn ball(&self) -> (usize, usize) {
        (self.ball_row, self.ball_col)
    }

    pub fn paddle(&self) -> usize {
        self.paddle
    }

    /// Column-tracking action: move the paddle centre toward the ball.
    pub fn oracle_action(&self) -> usize {
        match self.ball_col.cmp(&self.paddle) {
            std::cmp::Ordering::Less => 0,
            std::cmp::Ordering::Equal => 1,
            std::cmp::Ordering::Greater => 2,
        }
    }

    fn spawn<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.ball_row = 0;
        self.ball_col = rng.random_range(0..GRID);
    }

    fn render(&self) -> RawFrame {
        let side = GRID * SCALE;
        let mut data = vec![0.0f32; side * side];
        let mut paint = |row: usize, col: usize, v: f32| {
            for y in row * SCALE..(row + 1) * SCALE {
                for x in col * SCALE..(col + 1) * SCALE {
                    data[y * side + x] = data[y * side + x].max(v);
                }
            }
        };
        for c in self.paddle - 1..=self.paddle + 1 {
            paint(GRID - 1, c, PADDLE_PIXEL);
        }
        paint(self.ball_row, self.ball_col, BALL_PIXEL);
        RawFrame::new(side, side, 1, data)
    }
}

impl Environment for MiniCatch {
    fn name(&self) -> &str {
        "minicatch"
    }

    fn num_actions(&self) -> usize {
        3
    }

    fn raw_shape(&self) -> (usize, usize, usize) {
        (GRID * SCALE, GRID * SCALE, 1)
    }

    fn profile(&self) -> PreprocessConfig {
        PreprocessConfig {
            grayscale: true,
            frame_skip: 1,
            frame_stack: 4,
            height: 84,
            width: 84,
            max_pool: false,
            noop_max: 0,
            time_limit_frames: 108_000,
        }
    }

    fn reset(&mut self, rng: &mut EnvRng) -> RawFrame {
        self.paddle = GRID / 2;
        self.balls_done = 0;
        self.spawn(rng);
        self.render()
    }

    fn step(&mut self, action: usize, rng: &mut EnvRng) -> RawStep {
        self.paddle = match action {
            0 => (self.paddle - 1).max(1),
            2 => (self.paddle + 1).min(GRID - 2),
            _ => self.paddle,
        };
        self.ball_row += 1;
        let mut reward = 0.0;
        let mut info = Vec::new();
        if self.ball_row == GRID - 1 {
            let caught = self.ball_col.abs_diff(self.paddle) <= 1;
            reward = if caught { 1.0 } else { -1.0 };
            info.push(("catch", reward));
            self.balls_done += 1;
            if self.balls_done < BALLS {
                self.spawn(rng);
            }
        }
        RawStep {
            frame: self.render(),
            reward,
            done: self.balls_done == BALLS,
            truncated: false,
            info,
        }
    }
}

/// Exact expected episode return of the uniformly random policy, by
/// propagating the paddle-position distribution through every ball.
pub fn random_policy_expected_return() -> f64 {
    let mut dist = vec![0.0f64; GRID];
    dist[GRID / 2] = 1.0;
    let mut total = 0.0;
    for _ in 0..BALLS {
        for _ in 0..GRID - 1 {
            let mut next = vec![0.0f64; GRID];
            for (p, &mass) in dist.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                for target in [(p - 1).max(1), p, (p + 1).min(GRID - 2)] {
                    next[target] += mass / 3.0;
                }
            }
            dist = next;
        }
        let catch: f64 = dist
            .iter()
            .enumerate()
            .map(|(p, &mass)| mass * (0..GRID).filter(|c| c.abs_diff(p) <= 1).count() as f64 / GRID as f64)
            .sum();
        total += 2.0 * catch - 1.0;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn oracle_catches_every_ball() {
        let mut rng = EnvRng::seed_from_u64(3);
        let mut env = MiniCatch::new();
        for _ in 0..50 {
            env.reset(&mut rng);
            let (mut ret, mut steps) = (0.0, 0);
            loop {
                let s = env.step(env.oracle_action(), &mut rng);
                ret += s.reward;
                steps += 1;
                if s.done {
                    break;
                }
            }
            assert_eq!(ret, 10.0);
            assert_eq!(steps, 200);
        }
    }

    #[test]
    fn frame_shows_ball_and_paddle() {
        let mut rng = EnvRng::seed_from_u64(0);
        let mut env = MiniCatch::new();
        let f = env.reset(&mut rng);
        assert_eq!((f.height, f.width, f.channels), (84, 84, 1));
        let (_, col) = env.ball();
        assert_eq!(f.data[col * SCALE], BALL_PIXEL);
        assert_eq!(f.data[(GRID - 1) * SCALE * 84 + 10 * SCALE], PADDLE_PIXEL);
        assert_eq!(f.data.iter().filter(|&&v| v > 0.0).count(), 16 * 4);
    }

    #[test]
    fn random_baseline_is_negative() {
        let r = random_policy_expected_return();
        assert!(r < 0.0 && r > -10.0, "{r}");
    }
}
