use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn plume(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plume"))
        .args(args)
        .env("PLUME_OUT", out)
        .output()
        .unwrap()
}

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn is_empty(dir: &Path) -> bool {
    !dir.exists() || std::fs::read_dir(dir).unwrap().next().is_none()
}

#[test]
fn unknown_flag_exits_2_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = plume(&["generate", "--bogus", "--out", out.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(is_empty(&out));
    let o = plume(&["frobnicate"], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(is_empty(&out));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[grid]\nnx = 41\nwobble = 3\n").unwrap();
    let out = dir.path().join("out");
    let o = plume(&["generate", "--config", bad.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("wobble"));
    assert!(is_empty(&out));

    let missing = dir.path().join("absent.toml");
    assert_eq!(plume(&["reduce", "--config", missing.to_str().unwrap()], &out).status.code(), Some(2));
    // A stage whose inputs were never produced.
    assert_eq!(plume(&["train", "--config", &fixture("tiny.toml")], &out).status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("unstable.toml");
    // One explicit step per output interval violates the stability bound.
    std::fs::write(&cfg, "[grid]\nsubsteps_per_node = 1\n").unwrap();
    let o = plume(&["generate", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn desk_generate_emits_sixteen_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lesser.toml");
    std::fs::write(&cfg, "[wind]\nvariability = \"lesser\"\n").unwrap();
    let o = plume(&["generate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let case = dir.path().join("lesser");
    let trajectories = std::fs::read_dir(case.join("ensemble"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("traj_"))
        .count();
    assert_eq!(trajectories, 16);
    assert!(case.join("generate.manifest.toml").exists());
}

#[test]
fn tiny_pipeline_runs_and_replays_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("runs");
    let tiny = fixture("tiny.toml");
    for stage in ["generate", "reduce", "train", "bae", "invert", "sample", "study", "report"] {
        let o = plume(&[stage, "--config", &tiny, "--seed", "11"], &root);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let csv = std::fs::read_to_string(root.join("report/metrics.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("lesser,")).count(), 2);

    let replayed = dir.path().join("replayed");
    let manifest = root.join("lesser/train.manifest.toml");
    let o = plume(&["replay", manifest.to_str().unwrap(), "--out", replayed.to_str().unwrap()], &root);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 differ"));
}
