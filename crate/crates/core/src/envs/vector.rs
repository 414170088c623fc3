//! A fixed-size vector of independently seeded, preprocessed environments.

use rand::SeedableRng;

use super::{EnvRng, EnvStep, Environment, PreprocessConfig, Preprocessed};
use crate::error::{Error, Result};
use crate::observation::{Observation, Shape3};

/// RNG stream offset for environment slots.
pub const ENV_STREAM_BASE: u64 = 1000;

pub struct VectorEnv {
    envs: Vec<Preprocessed<Box<dyn Environment>>>,
    observations: Vec<Observation>,
}

impl VectorEnv {
    /// Creates `count` environments from `make`; slot `i` draws from stream
    /// `ENV_STREAM_BASE + i` of `seed`.
    pub fn new(make: impl Fn(usize) -> Box<dyn Environment>, count: usize, config: &PreprocessConfig, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("at least one environment is required".into()));
        }
        let envs = (0..count)
            .map(|i| {
                let mut rng = EnvRng::seed_from_u64(seed);
                rng.set_stream(ENV_STREAM_BASE + i as u64);
                Preprocessed::new(make(i), config.clone(), rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let actions = envs[0].num_actions();
        let shape = envs[0].observation_shape();
        if envs.iter().any(|e| e.num_actions() != actions || e.observation_shape() != shape) {
            return Err(Error::Config("vectorized environments must agree on actions and observation shape".into()));
        }
        let observations = envs.iter().map(|e| e.observation().clone()).collect();
        Ok(Self { envs, observations })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn num_actions(&self) -> usize {
        self.envs[0].num_actions()
    }

    pub fn observation_shape(&self) -> Shape3 {
        self.envs[0].observation_shape()
    }

    /// Raw frames consumed per agent step of one env (the frame skip).
    pub fn frame_skip(&self) -> usize {
        self.envs[0].config().frame_skip
    }

    /// Current observation of every slot.
    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn env(&self, slot: usize) -> &Preprocessed<Box<dyn Environment>> {
        &self.envs[slot]
    }

    /// Steps every slot with its action; results are slot-ordered. All
    /// actions are checked before any environment moves.
    pub fn step(&mut self, actions: &[usize]) -> Result<Vec<EnvStep>> {
        if actions.len() != self.envs.len() {
            return Err(Error::Input(format!(
                "got {} actions for {} environments",
                actions.len(),
                self.envs.len()
            )));
        }
        let n = self.num_actions();
        if let Some((slot, a)) = actions.iter().enumerate().find(|(_, &a)| a >= n) {
            return Err(Error::Input(format!("env {slot}: action {a} out of range ({n} actions)")));
        }
        let steps = self
            .envs
            .iter_mut()
            .zip(actions)
            .map(|(env, &a)| env.step(a))
            .collect::<Result<Vec<_>>>()?;
        for (o, s) in self.observations.iter_mut().zip(&steps) {
            *o = s.obs.clone();
        }
        Ok(steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvKind, MiniCatch};

    fn catch_vec(count: usize, seed: u64) -> VectorEnv {
        let profile = MiniCatch::new().profile();
        VectorEnv::new(|_| EnvKind::MiniCatch.make(), count, &profile, seed).unwrap()
    }

    #[test]
    fn invalid_action_names_env() {
        let mut v = catch_vec(3, 0);
        match v.step(&[0, 5, 1]) {
            Err(Error::Input(m)) => assert!(m.contains("env 1"), "{m}"),
            other => panic!("expected input error, got {other:?}"),
        }
        assert!(matches!(v.step(&[0, 1]), Err(Error::Input(_))));
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = catch_vec(2, 7);
        let mut b = catch_vec(2, 7);
        for t in 0..50 {
            let acts = [t % 3, (t + 1) % 3];
            let sa = a.step(&acts).unwrap();
            let sb = b.step(&acts).unwrap();
            for (x, y) in sa.iter().zip(&sb) {
                assert_eq!(x.next_obs, y.next_obs);
                assert_eq!(x.reward, y.reward);
            }
        }
    }

    #[test]
    fn slots_draw_different_streams() {
        let v = catch_vec(4, 7);
        let balls: Vec<_> = (0..4).map(|i| v.observations()[i].clone()).collect();
        assert!(balls.windows(2).any(|w| w[0] != w[1]));
    }
}
