use std::path::Path;

use plume_core::config::RunConfig;
use plume_core::error::Error;
use plume_core::io::{load_array, Manifest};
use plume_core::pipeline::{case_dir, replay, run_in_root, run_stage, Stage};

const TINY: &str = r#"
seed = 7
[grid]
nx = 41
ny = 9
n_steps = 20
final_time = 10.0
[wind]
pool_size = 8
training_winds = 3
[pca]
max_rank = 12
[train]
horizon = 4
epochs = 30
width = 16
validate_every = 10
[prior]
correlation_time = 2.0
[inversion]
bae_samples = 6
posterior_samples = 5
restarts = 3
eig_max = 20
[study]
p_values = [1, 2]
seeds = 1
epochs = 10
"#;

fn run_all(root: &Path, cfg: &RunConfig) {
    for stage in Stage::ALL {
        run_in_root(stage, cfg, root).unwrap_or_else(|e| panic!("{}: {e}", stage.name()));
    }
}

#[test]
fn stages_chain_report_and_replay_exactly() {
    let cfg = RunConfig::from_toml(TINY).unwrap();
    let root = tempfile::tempdir().unwrap();
    run_all(root.path(), &cfg);
    let case = case_dir(root.path(), &cfg);

    let generate = Manifest::load(&case.join("generate.manifest.toml")).unwrap();
    let trajectories = generate.outputs.iter().filter(|r| r.path.starts_with("ensemble/traj_")).count();
    assert_eq!(trajectories, 12);
    assert_eq!(generate.config_hash, cfg.hash());

    let report = std::fs::read_to_string(root.path().join("report/metrics.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert!(lines[0].starts_with("# config_hash:"));
    assert_eq!(lines[1], "case,mode,map_rel_l2,mahalanobis");
    assert_eq!(lines.len(), 4);

    let samples = load_array(&case.join("sample/bae_samples.arr")).unwrap();
    assert_eq!(samples.shape, vec![5, 20]);
    let svg = std::fs::read_to_string(case.join("sample/bae_posterior.svg")).unwrap();
    assert!(svg.matches("class=\"sample\"").count() >= 1 && svg.contains("class=\"truth\""));

    for stage in Stage::ALL {
        let dir = if stage.per_case() { case.clone() } else { root.path().to_path_buf() };
        let out = tempfile::tempdir().unwrap();
        let outcome = replay(&dir.join(Manifest::file_name(stage.name())), out.path()).unwrap();
        assert!(outcome.identical(), "{} differs in {:?}", stage.name(), outcome.mismatched);
        assert!(!outcome.matched.is_empty());
    }
}

#[test]
fn surrogate_stages_never_read_test_data() {
    let cfg = RunConfig::from_toml(TINY).unwrap();
    let root = tempfile::tempdir().unwrap();
    for stage in [Stage::Generate, Stage::Reduce, Stage::Train, Stage::Bae] {
        let m = run_in_root(stage, &cfg, root.path()).unwrap();
        if stage != Stage::Generate {
            for r in &m.inputs {
                assert!(!r.path.contains("test_") && !r.path.contains("observations"), "{} read {}", stage.name(), r.path);
            }
        }
    }
}

#[test]
fn missing_and_corrupted_inputs_are_reported() {
    let cfg = RunConfig::from_toml(TINY).unwrap();
    let root = tempfile::tempdir().unwrap();
    assert!(matches!(run_in_root(Stage::Reduce, &cfg, root.path()), Err(Error::Config(_))));
    assert!(matches!(run_in_root(Stage::Report, &cfg, root.path()), Err(Error::Config(_))));

    run_in_root(Stage::Generate, &cfg, root.path()).unwrap();
    run_in_root(Stage::Reduce, &cfg, root.path()).unwrap();
    let case = case_dir(root.path(), &cfg);
    let victim = case.join("ensemble/traj_0_0.arr");
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&victim, bytes).unwrap();

    let out = tempfile::tempdir().unwrap();
    let err = replay(&case.join("reduce.manifest.toml"), out.path()).unwrap_err();
    assert!(matches!(err, Error::HashMismatch(_)), "{err}");
    let err = run_stage(Stage::Reduce, &cfg, &case, out.path()).unwrap_err();
    assert!(matches!(err, Error::HashMismatch(_)), "{err}");
}
