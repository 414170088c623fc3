use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::network::NetworkSpec;
use crate::observation::{Frame, Shape3};
use crate::replay::SampleIndex;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_net(noisy: bool) -> QNetwork {
    let spec = NetworkSpec {
        base_channels: vec![2],
        channel_multiplier: 1,
        blocks_per_stage: 1,
        hidden_units: 8,
        adaptive_pool: 2,
        noisy,
        ..NetworkSpec::default()
    };
    QNetwork::build(&spec, Shape3::new(1, 6, 6), 2).unwrap()
}

fn obs(seed: u64) -> Observation {
    let mut r = rng(seed);
    let data = (0..36).map(|_| r.random::<u8>()).collect();
    Observation::new(vec![Frame::new(Shape3::new(1, 6, 6), data)])
}

fn entry(seed: u64, action: usize, ret: f64, bootstrap: bool) -> NStepEntry {
    NStepEntry {
        obs: obs(seed),
        action,
        return_n: ret,
        next_obs: obs(seed + 1000),
        discount_n: 0.99f64.powi(3),
        bootstrap,
        steps: 3,
    }
}

fn batch(entries: Vec<NStepEntry>) -> SampledBatch {
    let n = entries.len();
    SampledBatch {
        indices: (0..n).map(|slot| SampleIndex { slot, stamp: 0 }).collect(),
        weights: vec![1.0; n],
        entries,
        beta: 1.0,
    }
}

#[test]
fn terminal_target_is_the_return() {
    let y = double_dqn_targets(&[5.0], &[0.97], &[false], &[1.0, 2.0], &[3.0, 4.0], 2);
    assert_eq!(y, vec![5.0]);
}

#[test]
fn double_dqn_uses_target_value_at_online_argmax() {
    let gamma3 = 0.99f64.powi(3);
    assert!((gamma3 - 0.970299).abs() < 1e-15);
    let y = double_dqn_targets(&[1.0], &[gamma3], &[true], &[1.0, 5.0], &[10.0, 2.0], 2);
    assert!((y[0] - 2.940598).abs() < 1e-12);
}

#[test]
fn identical_networks_reduce_to_max() {
    let q = [0.3, -1.0, 2.5, 0.7, 0.7, 0.1];
    let y = double_dqn_targets(&[1.0, -2.0], &[0.5, 0.25], &[true, true], &q, &q, 3);
    assert_eq!(y, vec![1.0 + 0.5 * 2.5, -2.0 + 0.25 * 0.7]);
}

#[test]
fn loss_examples() {
    assert_eq!(weighted_loss(LossKind::Huber, &[1.0], &[1.0], &[1.0]).0, 0.0);
    assert_eq!(weighted_loss(LossKind::Huber, &[0.0], &[0.5], &[1.0]).0, 0.125);
    assert_eq!(weighted_loss(LossKind::Huber, &[0.0], &[2.0], &[1.0]).0, 1.5);
    assert_eq!(weighted_loss(LossKind::Mse, &[0.0], &[2.0], &[1.0]).0, 4.0);
}

#[test]
fn loss_gradient_matches_differences() {
    let q = [0.2, -1.7, 3.0, 0.9];
    let y = [0.1, 0.4, 0.0, 0.9];
    let w = [0.5, 1.0, 0.25, 0.8];
    for kind in [LossKind::Huber, LossKind::Mse] {
        let (_, g) = weighted_loss(kind, &q, &y, &w);
        for i in 0..q.len() {
            let h = 1e-6;
            let mut qp = q;
            qp[i] += h;
            let mut qm = q;
            qm[i] -= h;
            let fd = (weighted_loss(kind, &qp, &y, &w).0 - weighted_loss(kind, &qm, &y, &w).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{kind} {i}: {fd} vs {}", g[i]);
        }
    }
}

#[test]
fn td_error_examples() {
    assert_eq!(td_errors(&[1.0], &[3.0]), vec![2.0]);
    assert_eq!(td_errors(&[4.5], &[4.5]), vec![0.0]);
    assert_eq!(td_errors(&[1.0, 4.0], &[2.0, 0.0]), vec![1.0, 4.0]);
}

#[test]
fn adam_epsilon_scales_with_batch() {
    let c = AgentConfig::default();
    assert_eq!(c.adam_epsilon(), 1.953125e-5);
    let c = AgentConfig {
        batch_size: 32,
        ..AgentConfig::default()
    };
    assert_eq!(c.adam_epsilon(), 1.5625e-4);
}

#[test]
fn clipping_halves_norm_twenty() {
    assert_eq!(clip_factor(20.0, 10.0), 0.5);
    assert_eq!(clip_factor(3.0, 10.0), 1.0);
}

#[test]
fn epsilon_schedule() {
    let c = AgentConfig::default();
    assert_eq!(c.epsilon_at(0), 1.0);
    assert_eq!(c.epsilon_at(500_000), 0.01);
    assert_eq!(c.epsilon_at(10_000_000), 0.01);
    assert!((c.epsilon_at(250_000) - 0.505).abs() < 1e-12);
}

#[test]
fn config_validation() {
    assert!(AgentConfig::default().validate().is_ok());
    let c = AgentConfig {
        eps_final: 0.5,
        eps_initial: 0.1,
        ..AgentConfig::default()
    };
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    assert!("mse".parse::<LossKind>().is_ok());
    assert!("l1".parse::<LossKind>().is_err());
}

#[test]
fn target_sync_on_frame_boundaries() {
    let mut agent = Agent::<f64>::new(AgentConfig::default(), tiny_net(true), &mut rng(0)).unwrap();
    assert_eq!(agent.store().online, agent.store().target);
    assert!(!agent.maybe_sync_target(31_999));
    assert!(agent.maybe_sync_target(32_000));
    assert!(!agent.maybe_sync_target(32_004));
    assert!(agent.maybe_sync_target(64_000));
    // A jump over two boundaries copies once.
    assert!(agent.maybe_sync_target(130_000));
    assert_eq!(agent.sync_periods(), 4);
}

#[test]
fn eval_actions_are_deterministic() {
    let agent = Agent::<f32>::new(AgentConfig::default(), tiny_net(true), &mut rng(1)).unwrap();
    let o = [obs(3), obs(4)];
    let a = agent.act(&o, 0, &mut rng(5), ActMode::Eval).unwrap();
    let b = agent.act(&o, 0, &mut rng(6), ActMode::Eval).unwrap();
    assert_eq!(a, b);
}

#[test]
fn greedy_train_action_without_epsilon() {
    let config = AgentConfig {
        eps_initial: 0.0,
        eps_final: 0.0,
        ..AgentConfig::default()
    };
    let agent = Agent::<f64>::new(config, tiny_net(false), &mut rng(1)).unwrap();
    let o = [obs(3)];
    let x: Vec<f64> = o[0].to_unit_vec();
    let q = agent.net().forward(agent.online(), &x, 1, None).unwrap();
    assert_eq!(agent.act(&o, 0, &mut rng(2), ActMode::Train).unwrap(), vec![argmax(&q)]);
}

#[test]
fn train_step_reduces_loss_on_fixed_batch() {
    let config = AgentConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        ..AgentConfig::default()
    };
    let mut agent = Agent::<f32>::new(config, tiny_net(false), &mut rng(2)).unwrap();
    let b = batch(vec![
        entry(1, 0, 1.0, false),
        entry(2, 1, -1.0, false),
        entry(3, 0, 0.5, false),
        entry(4, 1, 2.0, false),
    ]);
    let first = agent.train_step(&b, &mut rng(3)).unwrap();
    let mut last = first.clone();
    for _ in 0..200 {
        last = agent.train_step(&b, &mut rng(3)).unwrap();
    }
    assert!(last.loss < 0.1 * first.loss, "{} -> {}", first.loss, last.loss);
    assert_eq!(agent.updates(), 201);
    assert_eq!(last.td_abs.len(), 4);
}

#[test]
fn train_step_leaves_target_untouched() {
    let mut agent = Agent::<f64>::new(AgentConfig::default(), tiny_net(true), &mut rng(2)).unwrap();
    let target = agent.store().target.clone();
    let b = batch(vec![entry(1, 0, 1.0, true), entry(2, 1, 0.0, true)]);
    agent.train_step(&b, &mut rng(3)).unwrap();
    assert_eq!(agent.store().target, target);
    assert_ne!(agent.store().online.tensors, target.tensors);
}

#[test]
fn target_perturbation_moves_targets_not_online() {
    let agent = Agent::<f64>::new(AgentConfig::default(), tiny_net(false), &mut rng(4)).unwrap();
    let entries = vec![entry(1, 0, 1.0, true), entry(2, 1, 0.0, true)];
    let y0 = agent.compute_targets(&entries, None, &mut rng(0)).unwrap();
    let mut agent = agent;
    let online = agent.store().online.clone();
    for t in agent.store_mut().target.tensors.iter_mut() {
        t.data.iter_mut().for_each(|v| *v += 0.01);
    }
    let y1 = agent.compute_targets(&entries, None, &mut rng(0)).unwrap();
    assert_ne!(y0, y1);
    assert_eq!(agent.store().online, online);
}

#[test]
fn non_finite_loss_aborts_without_update() {
    let mut agent = Agent::<f32>::new(AgentConfig::default(), tiny_net(true), &mut rng(2)).unwrap();
    let before = agent.store().online.tensors.clone();
    let b = batch(vec![entry(1, 0, f64::NAN, false)]);
    assert!(matches!(agent.train_step(&b, &mut rng(3)), Err(Error::NonFinite(_))));
    assert_eq!(agent.store().online.tensors, before);
    assert_eq!(agent.updates(), 0);
}
