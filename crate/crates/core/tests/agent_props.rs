mod common;

use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use swiftq::agent::{act_batch, element_loss, weighted_loss, ActMode, AgentConfig, LossKind};
use swiftq::network::QNetwork;
use swiftq::observation::Shape3;

use common::{random_unit_batch, rng, small_spec};

proptest! {
    #[test]
    fn huber_grows_with_error_magnitude(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let (small, large) = if a.abs() <= b.abs() { (a, b) } else { (b, a) };
        prop_assert!(element_loss(LossKind::Huber, small) <= element_loss(LossKind::Huber, large));
        prop_assert!(element_loss(LossKind::Huber, a) <= element_loss(LossKind::Mse, a) + 1e-12);
        prop_assert!(element_loss(LossKind::Huber, a) >= 0.0);
    }

    #[test]
    fn loss_is_linear_in_weights(
        rows in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.0f64..1.0, 0.0f64..1.0), 1..32),
        s in 0.0f64..3.0,
        huber in any::<bool>(),
    ) {
        let kind = if huber { LossKind::Huber } else { LossKind::Mse };
        let q: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let w1: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let w2: Vec<f64> = rows.iter().map(|r| r.3).collect();
        let mix: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + s * b).collect();
        let (l1, g1) = weighted_loss(kind, &q, &y, &w1);
        let (l2, g2) = weighted_loss(kind, &q, &y, &w2);
        let (lm, gm) = weighted_loss(kind, &q, &y, &mix);
        prop_assert!((lm - (l1 + s * l2)).abs() <= 1e-9 * (1.0 + lm.abs()));
        for i in 0..q.len() {
            prop_assert!((gm[i] - (g1[i] + s * g2[i])).abs() <= 1e-9 * (1.0 + gm[i].abs()));
        }
    }
}

#[test]
fn full_exploration_is_uniform() {
    let shape = Shape3::new(1, 4, 4);
    let actions = 5;
    let net = QNetwork::build(&small_spec(swiftq::network::SnVariant::None), shape, actions).unwrap();
    let mut r = rng(7);
    let weights = net.init::<f32, _>(&mut r).online;
    let obs = random_unit_batch(&mut r, shape, 50);
    let config = AgentConfig::default();
    assert_eq!(config.epsilon_at(0), 1.0);
    let mut counts = vec![0u64; actions];
    for _ in 0..1_000 {
        for a in act_batch(&net, &config, &weights, &obs, 0, &mut r, ActMode::Train).unwrap() {
            counts[a] += 1;
        }
    }
    let n: u64 = counts.iter().sum();
    let e = n as f64 / actions as f64;
    let stat: f64 = counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
    let p = 1.0 - ChiSquared::new((actions - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "counts {counts:?}, p = {p}");
}
