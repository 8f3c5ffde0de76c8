use std::path::Path;
use std::process::{Command, Output};

fn bgslot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bgslot")).args(args).output().expect("spawn bgslot")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Desk preset shrunk to a few steps on tiny scenes.
fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let out = bgslot(&["config", "--preset", "desk"]);
    assert!(out.status.success());
    let mut config: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    config["steps"] = 3.into();
    config["batch_size"] = 2.into();
    config["frames_per_clip"] = 2.into();
    config["data"]["num_train"] = 3.into();
    config["data"]["num_eval"] = 2.into();
    config["data"]["scene"]["num_frames"] = 3.into();
    let file = dir.join("config.json");
    std::fs::write(&file, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    file
}

#[test]
fn generate_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = bgslot(&["generate", "--preset", "desk", "--num-seqs", "2", "--seed", "7", "--out", path(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").exists());

    let config = tiny_config(dir.path());
    let run = dir.path().join("run");
    let out = bgslot(&[
        "train",
        "--config",
        path(&config),
        "--override",
        &format!("output_dir={}", path(&run)),
        "--override",
        &format!("data.train_dir={}", path(&data)),
        "--override",
        &format!("data.eval_dir={}", path(&data)),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trained: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(run.join("model.ckpt").exists());
    assert_eq!(std::fs::read_to_string(run.join("losses.jsonl")).unwrap().lines().count(), 3);

    let report = dir.path().join("eval.json");
    let out = bgslot(&[
        "eval",
        "--ckpt",
        path(&run.join("model.ckpt")),
        "--data",
        path(&data),
        "--mode",
        "windowed",
        "--out",
        path(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let evaluated: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(evaluated, trained);

    let out = bgslot(&[
        "eval",
        "--ckpt",
        path(&run.join("model.ckpt")),
        "--data",
        path(&data),
        "--mode",
        "per_frame",
        "--out",
        path(&dir.path().join("per_frame.json")),
    ]);
    assert!(out.status.success());
}

#[test]
fn ablate_then_report_regenerates_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let suite = dir.path().join("suite");
    let out = bgslot(&[
        "ablate",
        "--suite",
        "table6",
        "--config",
        path(&config),
        "--out",
        path(&suite),
        "--seeds",
        "1",
        "--override",
        "label_noise.spurious_rate=1.0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(suite.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(suite.join("triptych_00.png").exists());

    let again = dir.path().join("again");
    let out = bgslot(&["report", "--in", path(&suite), "--out", path(&again)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["summary.csv", "metrics.csv", "losses.csv", "triptych_00.png"] {
        assert_eq!(
            std::fs::read(suite.join(name)).unwrap(),
            std::fs::read(again.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let unknown = bgslot(&["train", "--config", path(&config), "--override", "batch_sise=3"]);
    assert_eq!(unknown.status.code(), Some(2));
    let invalid = bgslot(&["train", "--config", path(&config), "--override", "batch_size=0"]);
    assert_eq!(invalid.status.code(), Some(2));
    assert_eq!(bgslot(&["config", "--preset", "huge"]).status.code(), Some(2));
    let suite = bgslot(&["ablate", "--suite", "table9", "--config", path(&config), "--out", path(dir.path())]);
    assert_eq!(suite.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = bgslot(&[
        "train",
        "--config",
        path(&config),
        "--override",
        "step_size=1e30",
        "--override",
        "warmup_steps=0",
        "--override",
        "steps=4",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_files_exit_with_1() {
    let out = bgslot(&[
        "eval",
        "--ckpt",
        "/nonexistent/model.ckpt",
        "--data",
        "/nonexistent",
        "--out",
        "/tmp/x.json",
    ]);
    assert_eq!(out.status.code(), Some(1));
}
