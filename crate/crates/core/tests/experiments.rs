use plume_core::config::RunConfig;
use plume_core::dispersion::{mean_distance, sample_wind_params, select_test_wind, WindField};
use plume_core::experiments::*;

fn tiny() -> RunConfig {
    RunConfig::from_toml(
        r#"
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
epochs = 40
width = 16
validate_every = 10
[prior]
correlation_time = 2.0
[inversion]
bae_samples = 6
posterior_samples = 5
restarts = 4
eig_max = 20
[study]
p_values = [1, 3]
seeds = 2
epochs = 10
"#,
    )
    .unwrap()
}

#[test]
fn seeds_are_stable_and_separate_streams() {
    assert_eq!(derive_seed(1, "sweep", 3), derive_seed(1, "sweep", 3));
    let mut all = vec![];
    for stream in ["training-winds", "test-wind", "sweep", "final"] {
        for index in 0..50 {
            all.push(derive_seed(20_240_601, stream, index));
        }
    }
    let n = all.len();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), n);
    assert_ne!(derive_seed(1, "sweep", 0), derive_seed(2, "sweep", 0));
}

#[test]
fn clusters_follow_their_founders() {
    let a = vec![1.0, 2.0, 3.0];
    let a_near = vec![1.0, 2.0, 3.001];
    let b = vec![-1.0, 0.0, 5.0];
    let c = vec![10.0, 10.0, 10.0];
    assert_eq!(cluster_curves(&[a.clone(), b.clone(), a_near, c, b], 0.01), vec![0, 1, 0, 2, 1]);
    assert!(cluster_curves(&[], 0.01).is_empty());
    assert_eq!(cluster_curves(&[a.clone(), a], 0.0), vec![0, 0]);
}

#[test]
fn ensemble_layout_and_wind_selection() {
    let cfg = tiny();
    let ens = build_ensemble(&cfg).unwrap();
    let td = &ens.training;
    assert_eq!(td.trajectories.len(), cfg.wind.training_winds * cfg.sources.training.len());
    for t in &td.trajectories {
        assert!(t.snapshot(0).iter().all(|v| *v == 0.0));
        assert!(t.values.iter().all(|v| v.is_finite()));
    }
    let (train, val) = td.split();
    assert_eq!(val, (8..12).collect::<Vec<_>>());
    assert_eq!(train.len() + val.len(), td.trajectories.len());

    // Training distances are logged, not matched to a band.
    assert!(ens.wind_distances.iter().all(|d| *d > 0.0));
    for i in 0..ens.wind_distances.len() {
        for j in 0..i {
            assert_ne!(ens.wind_distances[i], ens.wind_distances[j]);
        }
    }

    // Rebuild the test pool and pick the winner with the library oracle.
    let grid = cfg.grid_spec().unwrap();
    let scale = cfg.wind.variability.scale();
    let pool: Vec<WindField> = (0..cfg.wind.pool_size as u64)
        .map(|i| WindField::from_params(&sample_wind_params(derive_seed(cfg.seed, "test-wind", i), scale).unwrap(), &grid))
        .collect();
    let training = td.wind_fields();
    let best = select_test_wind(&pool, &training).unwrap();
    assert_eq!(pool[best], WindField::from_params(&ens.test.wind_params, &grid));
    let chosen = mean_distance(&pool[best], &training);
    assert!(pool.iter().all(|w| mean_distance(w, &training) <= chosen));

    let again = build_ensemble(&cfg).unwrap();
    assert_eq!(again.training.trajectories, td.trajectories);
    assert_eq!(again.test.observations, ens.test.observations);
}

#[test]
fn reduction_sweep_and_inversion_on_a_tiny_case() {
    let cfg = tiny();
    let ens = build_ensemble(&cfg).unwrap();
    let td = &ens.training;
    let split = fit_split_reduction(&cfg, td).unwrap();
    assert!(split.state_error <= cfg.pca.state_error_target);
    assert!(split.wind_error <= cfg.pca.wind_error_target);

    let (tr, va) = td.split();
    let train = flow_dataset(td, &split, &tr).unwrap();
    let val = flow_dataset(td, &split, &va).unwrap();
    let rows = sweep_horizon(&cfg, &train, &val, td.grid.dt(), &cfg.study.p_values, cfg.study.seeds).unwrap();
    assert_eq!(rows.len(), cfg.study.p_values.len());
    for r in &rows {
        assert_eq!(r.errors.len(), cfg.study.seeds);
        assert!(r.min() <= r.mean() && r.mean() <= r.max());
    }

    let report = run_case(&cfg).unwrap();
    assert_eq!(report.rows.len(), 2);
    for row in &report.rows {
        assert!(row.metrics.map_rel_l2 >= 0.0 && row.metrics.mahalanobis >= 0.0);
    }
    for (_, inv) in &report.inversions {
        assert_eq!(inv.samples.len(), cfg.inversion.posterior_samples);
        let lp = &inv.posterior;
        for (p, d) in lp.p().iter().zip(lp.d()) {
            assert!((2.0 * p + p * p + d).abs() < 1e-12);
        }
    }
}
