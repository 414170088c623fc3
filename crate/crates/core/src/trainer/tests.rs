use super::*;
use crate::envs::EnvKind;
use crate::network::SnVariant;

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.env = EnvKind::Chain { n: 4 };
    c.base_channels = vec![2, 2, 2];
    c.channel_multiplier = 1;
    c.blocks_per_stage = 1;
    c.hidden_units = 8;
    c.adaptive_pool = 2;
    c.batch_size = 8;
    c.num_envs = 4;
    c.train_steps_per_vector_step = 2.0;
    c.warmup_frames = 40;
    c.total_frames = 400;
    c.replay_capacity = 1_000;
    c.target_sync_frames = 100;
    c.snapshot_period_frames = 0;
    c
}

#[test]
fn schedule_ratio_and_warmup() {
    let s = Schedule::default();
    assert_eq!(s.replay_ratio(), 8.0);
    // 80k frames at 64 envs and skip 4 is 312.5 vector steps
    assert_eq!(s.warmup_vector_steps(4), 312);
    assert_eq!(s.warmup_vector_steps(1), 1249);
    let frac = Schedule {
        train_steps_per_vector_step: 0.25,
        ..s
    };
    assert_eq!((1..=8).map(|j| frac.train_steps_through(j)).collect::<Vec<_>>(), [0, 0, 0, 1, 1, 1, 1, 2]);
}

#[test]
fn counters_follow_schedule() {
    let mut t = Trainer::new(tiny(), false).unwrap();
    let warm = t.warmup_vector_steps();
    assert_eq!(warm, 9);
    while t.iterate().unwrap() {
        let s = t.state();
        let post = s.vector_steps.saturating_sub(warm);
        assert_eq!(s.train_steps, 2 * post);
        assert_eq!(s.samples, 8 * s.train_steps);
        assert_eq!(s.frames, s.transitions);
        assert_eq!(s.transitions, 4 * s.vector_steps);
    }
    let s = t.state();
    assert_eq!(s.frames, 400);
    assert_eq!(s.train_steps, 2 * (100 - 9));
}

#[test]
fn no_training_before_warmup() {
    let mut c = tiny();
    c.warmup_frames = 400;
    let mut t = Trainer::new(c, false).unwrap();
    while t.iterate().unwrap() {
        assert!(t.state().frames < 400);
        assert_eq!(t.state().train_steps, 0);
    }
    // the vector step that reaches the warmup frame trains
    assert_eq!(t.state().frames, 400);
    assert_eq!(t.state().train_steps, 2);
}

#[test]
fn serial_runs_are_bit_identical() {
    let go = || {
        let mut t = Trainer::new(tiny(), false).unwrap();
        t.keep_metrics(true);
        let s = t.run().unwrap();
        let losses: Vec<u32> = t.metrics().iter().map(|m| m.loss.to_bits() as u32).collect();
        (s.state.transition_digest, losses, t.agent().online().clone())
    };
    let a = go();
    let b = go();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn overlap_matches_serial_stream() {
    let mut serial = tiny();
    serial.sn = SnVariant::Last;
    let mut overlap = serial.clone();
    overlap.mode = Mode::Overlap;
    let a = run(serial, false).unwrap();
    let b = run(overlap, false).unwrap();
    assert_eq!(a.state.transition_digest, b.state.transition_digest);
    assert_eq!(a.state.train_steps, b.state.train_steps);
    assert_eq!(a.state.samples, b.state.samples);
}

#[test]
fn writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.out_dir = dir.path().join("run");
    c.snapshot_period_frames = 100;
    let summary = run(c.clone(), true).unwrap();
    let names: Vec<String> = summary
        .snapshots
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(
        names,
        ["frame_000000000100", "frame_000000000200", "frame_000000000300", "frame_000000000400", "final"]
    );
    let text = fs::read_to_string(c.out_dir.join("config.txt")).unwrap();
    assert_eq!(RunConfig::parse(&text).unwrap(), c);
    let metrics = fs::read_to_string(c.out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count() as u64, 1 + summary.state.train_steps);
    assert!(c.out_dir.join("episodes.csv").exists());
    assert!(c.out_dir.join("throughput.csv").exists());
}

#[test]
fn snapshot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.out_dir = dir.path().join("run");
    let mut t = Trainer::new(c, true).unwrap();
    t.run().unwrap();
    let snap = load_snapshot(&t.config().out_dir.join("snapshots/final")).unwrap();
    assert_eq!(&snap.weights, t.agent().online());
    assert_eq!(snap.meta.state.train_steps, t.state().train_steps);
    assert_eq!(snap.meta.state.transition_digest, t.state().transition_digest);
    assert_eq!(snap.meta.updates, t.agent().updates());
    assert_eq!(&snap.meta.config, t.config());
    assert_eq!(snap.meta.rngs.len(), 3);
}

#[test]
fn corrupted_snapshot_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.out_dir = dir.path().join("run");
    c.total_frames = 40;
    run(c.clone(), true).unwrap();
    let snap = c.out_dir.join("snapshots/final");
    let w = snap.join("weights.bin");
    let mut bytes = fs::read(&w).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&w, bytes).unwrap();
    assert!(matches!(load_snapshot(&snap), Err(Error::Format { .. })));
}

#[test]
fn stack_is_ordered_at_ratio_eight() {
    let stack = modification_stack(&RunConfig::default());
    let labels: Vec<&str> = stack.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(labels, ["baseline", "+batch256", "+vector_envs", "+overlap"]);
    for (_, c) in &stack {
        assert_eq!(c.schedule().replay_ratio(), 8.0);
    }
}
