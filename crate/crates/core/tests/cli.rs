use std::ffi::OsString;
use std::path::Path;

fn run(args: &[&dyn AsRef<std::ffi::OsStr>]) -> i32 {
    let mut full: Vec<OsString> = vec!["swiftq".into()];
    full.extend(args.iter().map(|a| a.as_ref().to_os_string()));
    swiftq::cli::main(full)
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.txt");
    std::fs::write(
        &path,
        "# small chain run\n\
         env = chain:4\n\
         base_channels = 2,2,2\n\
         blocks_per_stage = 1\n\
         hidden_units = 8\n\
         adaptive_pool = 2\n\
         batch_size = 8\n\
         num_envs = 4\n\
         warmup_frames = 40\n\
         total_frames = 800\n\
         replay_capacity = 1000\n\
         target_sync_frames = 100\n\
         snapshot_period_frames = 400\n",
    )
    .unwrap();
    path
}

#[test]
fn train_eval_plot() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("run");
    assert_eq!(run(&[&"train", &"--config", &config, &"--out", &out]), 0);
    for f in ["config.txt", "metrics.csv", "episodes.csv", "snapshots/final/manifest.txt", "snapshots/final/weights.bin"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let periodic = std::fs::read_dir(out.join("snapshots"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("frame_"))
        .count();
    assert_eq!(periodic, 2);

    let eval = dir.path().join("eval.csv");
    assert_eq!(run(&[&"eval", &"--run", &out, &"--budget", &"200", &"--out", &eval]), 0);
    let text = std::fs::read_to_string(&eval).unwrap();
    assert!(text.lines().next().unwrap().starts_with("pass,snapshot"));
    assert!(text.contains("reevaluation"));

    let scores = dir.path().join("scores.csv");
    std::fs::write(&scores, "game,random,human,agent\npong,-20.7,14.6,28.4\nbreakout,1.7,30.5,10.0\n").unwrap();
    assert_eq!(run(&[&"plot", &"--run", &out, &"--scores", &scores, &"--points", &"10"]), 0);
    let curve = std::fs::read_to_string(out.join("curve_chain_4.csv")).unwrap();
    assert_eq!(curve.lines().count(), 11);
    assert!(out.join("curve_chain_4.svg").is_file());
    let table = std::fs::read_to_string(out.join("hns_table.csv")).unwrap();
    assert!(table.contains("pong,-20.7,14.6,28.4,139"));
}

#[test]
fn degenerate_score_table_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("run");
    assert_eq!(run(&[&"train", &"--config", &config, &"--out", &out, &"--total-frames", &"160"]), 0);
    let scores = dir.path().join("scores.csv");
    std::fs::write(&scores, "game,random,human,agent\nflat,3,3,5\n").unwrap();
    assert_eq!(run(&[&"plot", &"--run", &out, &"--scores", &scores]), 2);
}
