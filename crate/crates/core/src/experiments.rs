//! End-to-end studies: ensemble generation, reduction, surrogate training,
//! the composition-horizon sweep, BAE versus traditional inversions and
//! multi-start MAP stability.
//!
//! Every random draw comes from a seed derived from the run seed and a named
//! stream, so each stage is reproducible in isolation.

use rand::SeedableRng;

use crate::bayes::{
    self, BaeStats, DataModel, GaussianPrior, InverseProblem, LaplacePosterior, MapResult,
    NoiseModel,
};
use crate::config::RunConfig;
use crate::dispersion::{
    relative_wind_distance, sample_source_magnitude, sample_wind_params, top_indices,
    GridSpec, PdeSolver, SourceMagnitude, StateTrajectory, WindField, WindParams,
};
use crate::error::{Error, Result};
use crate::flownet::{
    self, FlowDataset, FlowNetParams, FlowSample, Normalization, TrainConfig, TrainOutcome,
};
use crate::linalg;
use crate::observe::{ObservationOperator, ObservationSet, SurrogateForward};
use crate::reduction::{
    fit_pca, fit_pca_with_rule, reconstruction_error, reduce_wind, state_snapshot_matrix,
    wind_snapshot_matrix, PcaBasis, RankRule, ReducedTrajectory,
};

/// Seed for draw `index` of the named `stream`.
pub fn derive_seed(base: u64, stream: &str, index: u64) -> u64 {
    // FNV-1a of the stream name, then splitmix64 finalization.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = base ^ h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The training solves of one variability case.
///
/// Trajectory `k·J + j` uses wind `k` and source `j`; the last wind is the
/// validation wind of the tuning split.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub grid: GridSpec,
    pub sources: Vec<SourceMagnitude>,
    pub wind_params: Vec<WindParams>,
    pub trajectories: Vec<StateTrajectory>,
}

impl TrainingData {
    pub fn n_winds(&self) -> usize {
        self.wind_params.len()
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn index(&self, wind: usize, source: usize) -> usize {
        wind * self.n_sources() + source
    }

    /// Trajectory indices of the tuning split: all but the last wind, then
    /// the last wind.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let cut = self.index(self.n_winds() - 1, 0);
        ((0..cut).collect(), (cut..self.trajectories.len()).collect())
    }

    pub fn wind_fields(&self) -> Vec<WindField> {
        self.wind_params
            .iter()
            .map(|p| WindField::from_params(p, &self.grid))
            .collect()
    }
}

/// The held-out source and wind with the sensor data they produce.
#[derive(Clone, Debug)]
pub struct TestData {
    pub source: SourceMagnitude,
    pub wind_params: WindParams,
    pub observations: ObservationSet,
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    pub training: TrainingData,
    pub test: TestData,
    /// `‖w_k − w̄‖² / ‖w̄‖²` of each training wind.
    pub wind_distances: Vec<f64>,
    pub test_wind_distance: f64,
    /// `‖w* − w_k‖ / ‖w_k‖` for every training wind.
    pub test_to_training: Vec<f64>,
}

pub fn mean_wind(cfg: &RunConfig, grid: &GridSpec) -> WindField {
    WindField::from_params(&WindParams::mean(cfg.wind.variability.scale()), grid)
}

/// Draws `pool_size` candidates of `stream` and returns the parameters of
/// the ones with the highest scores. Candidates are generated one at a time
/// so the pool never resides in memory.
fn select_from_pool(
    cfg: &RunConfig,
    grid: &GridSpec,
    stream: &str,
    count: usize,
    mut score: impl FnMut(&WindField) -> Result<f64>,
) -> Result<Vec<WindParams>> {
    let scale = cfg.wind.variability.scale();
    let mut params = Vec::with_capacity(cfg.wind.pool_size);
    let mut scores = Vec::with_capacity(cfg.wind.pool_size);
    for i in 0..cfg.wind.pool_size {
        let p = sample_wind_params(derive_seed(cfg.seed, stream, i as u64), scale)?;
        scores.push(score(&WindField::from_params(&p, grid))?);
        params.push(p);
    }
    if count > params.len() {
        return Err(Error::Config(format!(
            "cannot select {count} of {} wind candidates",
            params.len()
        )));
    }
    Ok(top_indices(&scores, count)
        .into_iter()
        .map(|i| params[i].clone())
        .collect())
}

/// The sixteen training solves, the test solve and its noisy observations.
pub fn build_ensemble(cfg: &RunConfig) -> Result<Ensemble> {
    cfg.validate()?;
    let grid = cfg.grid_spec()?;
    let wbar = mean_wind(cfg, &grid);

    let wind_params = select_from_pool(cfg, &grid, "training-winds", cfg.wind.training_winds, |w| {
        relative_wind_distance(w, &wbar)
    })?;
    let winds: Vec<WindField> = wind_params
        .iter()
        .map(|p| WindField::from_params(p, &grid))
        .collect();
    let wind_distances = winds
        .iter()
        .map(|w| relative_wind_distance(w, &wbar))
        .collect::<Result<Vec<_>>>()?;

    let test_wind_params = select_from_pool(cfg, &grid, "test-wind", 1, |w| {
        Ok(crate::dispersion::mean_distance(w, &winds))
    })?
    .remove(0);
    let test_wind = WindField::from_params(&test_wind_params, &grid);
    let test_wind_distance = relative_wind_distance(&test_wind, &wbar)?;
    let test_to_training = winds
        .iter()
        .map(|w| Ok(relative_wind_distance(&test_wind, w)?.sqrt()))
        .collect::<Result<Vec<_>>>()?;

    let sources: Vec<SourceMagnitude> = cfg
        .sources
        .training
        .iter()
        .map(|e| sample_source_magnitude(e[0], e[1], &grid))
        .collect();
    let solver = PdeSolver::new(&grid, &cfg.physics);
    let mut trajectories = Vec::with_capacity(winds.len() * sources.len());
    for w in &winds {
        for z in &sources {
            trajectories.push(solver.solve(z, w)?);
        }
    }

    let [e1, e2] = cfg.sources.test;
    let test_source = sample_source_magnitude(e1, e2, &grid);
    let truth = solver.solve(&test_source, &test_wind)?;
    let op = ObservationOperator::new(&grid, &cfg.sensor_locations(), cfg.sensors.sampling)?;
    let observations = crate::observe::make_test_observations(
        &truth,
        &op,
        cfg.sources.test_noise,
        derive_seed(cfg.seed, "test-noise", 0),
    )?;

    Ok(Ensemble {
        training: TrainingData {
            grid,
            sources,
            wind_params,
            trajectories,
        },
        test: TestData {
            source: test_source,
            wind_params: test_wind_params,
            observations,
        },
        wind_distances,
        test_wind_distance,
        test_to_training,
    })
}

/// State and wind bases with their validation errors.
#[derive(Clone, Debug)]
pub struct Reduction {
    pub state: PcaBasis,
    pub wind: PcaBasis,
    /// Worst relative reconstruction error on the held-out snapshots.
    pub state_error: f64,
    pub wind_error: f64,
}

fn rank_rule(fixed: Option<usize>, target: f64, max_rank: usize) -> RankRule {
    match fixed {
        Some(r) => RankRule::Fixed(r),
        None => RankRule::ErrorTarget {
            max_rel_error: target,
            max_rank,
        },
    }
}

/// Fits both bases on the tuning split and measures them on the held-out
/// wind; ranks come from the configured rule.
pub fn fit_split_reduction(cfg: &RunConfig, ens: &TrainingData) -> Result<Reduction> {
    let (train, val) = ens.split();
    let winds = ens.wind_fields();
    let n_train_winds = ens.n_winds() - 1;

    let train_states: Vec<&StateTrajectory> = train.iter().map(|&i| &ens.trajectories[i]).collect();
    let check_states: Vec<&[f64]> = val
        .iter()
        .flat_map(|&i| ens.trajectories[i].snapshots())
        .collect();
    let state = fit_pca_with_rule(
        &state_snapshot_matrix(&train_states),
        &check_states,
        rank_rule(cfg.pca.state_rank, cfg.pca.state_error_target, cfg.pca.max_rank),
    )?;

    let train_winds: Vec<&WindField> = winds[..n_train_winds].iter().collect();
    let check_winds: Vec<&[f64]> = winds[n_train_winds..]
        .iter()
        .flat_map(|w| (0..w.n_steps).map(move |n| w.step(n)))
        .collect();
    let wind = fit_pca_with_rule(
        &wind_snapshot_matrix(&train_winds),
        &check_winds,
        rank_rule(cfg.pca.wind_rank, cfg.pca.wind_error_target, cfg.pca.max_rank),
    )?;

    Ok(Reduction {
        state_error: reconstruction_error(check_states.iter().copied(), &state)?,
        wind_error: reconstruction_error(check_winds.iter().copied(), &wind)?,
        state,
        wind,
    })
}

/// Refits both bases on every training solve at the given ranks. The
/// reported errors are in-sample.
pub fn fit_full_reduction(ens: &TrainingData, state_rank: usize, wind_rank: usize) -> Result<Reduction> {
    let winds = ens.wind_fields();
    let states: Vec<&StateTrajectory> = ens.trajectories.iter().collect();
    let state = fit_pca(&state_snapshot_matrix(&states), state_rank)?;
    let wind_refs: Vec<&WindField> = winds.iter().collect();
    let wind = fit_pca(&wind_snapshot_matrix(&wind_refs), wind_rank)?;
    Ok(Reduction {
        state_error: reconstruction_error(ens.trajectories.iter().flat_map(|t| t.snapshots()), &state)?,
        wind_error: reconstruction_error(
            winds.iter().flat_map(|w| (0..w.n_steps).map(move |n| w.step(n))),
            &wind,
        )?,
        state,
        wind,
    })
}

/// Reduced samples for the listed trajectories.
pub fn flow_dataset(ens: &TrainingData, red: &Reduction, indices: &[usize]) -> Result<FlowDataset> {
    let winds = ens.wind_fields();
    let reduced_winds = winds
        .iter()
        .map(|w| reduce_wind(w, &red.wind))
        .collect::<Result<Vec<_>>>()?;
    let samples = indices
        .iter()
        .map(|&i| {
            let (k, j) = (i / ens.n_sources(), i % ens.n_sources());
            Ok(FlowSample {
                states: ReducedTrajectory::from_states(&ens.trajectories[i], &red.state)?,
                z: ens.sources[j].values.clone(),
                wind: reduced_winds[k].clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FlowDataset::new(red.state.rank(), red.wind.rank(), samples)
}

/// Training settings for one run: the configured ones with the horizon,
/// epoch count and seed replaced.
pub fn run_train_config(cfg: &RunConfig, horizon: usize, epochs: usize, stream: &str, index: u64) -> TrainConfig {
    TrainConfig {
        horizon,
        epochs,
        seed: derive_seed(cfg.seed ^ cfg.train.seed, stream, index),
        ..cfg.train.clone()
    }
}

/// Glorot-initialized network whose output layer starts at zero, so the
/// untrained map is the identity `c ↦ c`.
pub fn init_network(data: &FlowDataset, tc: &TrainConfig, dt: f64) -> FlowNetParams {
    let mut net = FlowNetParams::new(data.r, data.r_w, tc.width, tc.depth, dt, tc.seed)
        .with_normalization(Normalization::fit(data, dt));
    net.zero_output_layer();
    net
}

pub fn train_surrogate(
    data: &FlowDataset,
    validation: Option<&FlowDataset>,
    tc: &TrainConfig,
    dt: f64,
) -> Result<TrainOutcome> {
    flownet::train(data, validation, init_network(data, tc, dt), tc)
}

/// Validation-error statistics of one horizon over the sweep seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub horizon: usize,
    /// Best validation error of each seed.
    pub errors: Vec<f64>,
}

impl SweepRow {
    pub fn mean(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.errors.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.errors.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.errors.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Trains `seeds` networks per horizon on the tuning split. A run that
/// diverges contributes an infinite error rather than aborting the sweep.
pub fn sweep_horizon(
    cfg: &RunConfig,
    train: &FlowDataset,
    validation: &FlowDataset,
    dt: f64,
    horizons: &[usize],
    seeds: usize,
) -> Result<Vec<SweepRow>> {
    horizons
        .iter()
        .map(|&p| {
            let errors = (0..seeds)
                .map(|s| {
                    let tc = run_train_config(cfg, p, cfg.study.epochs, "sweep", s as u64);
                    match train_surrogate(train, Some(validation), &tc, dt) {
                        Ok(out) => Ok(out.best_validation.unwrap_or(f64::INFINITY)),
                        Err(Error::Diverged { .. }) => Ok(f64::INFINITY),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow { horizon: p, errors })
        })
        .collect()
}

/// Prior over the `N` source values, calibrated unless the operator
/// constants are configured.
pub fn build_prior(cfg: &RunConfig, grid: &GridSpec) -> Result<GaussianPrior> {
    let (gamma, delta) = match (cfg.prior.gamma, cfg.prior.delta) {
        (Some(g), Some(d)) => (g, d),
        _ => bayes::calibrate_prior(grid.n_steps, grid.dt(), cfg.prior.correlation_time, cfg.prior.std)?,
    };
    bayes::build_prior(grid.n_steps, grid.dt(), gamma, delta)
}

/// Surrogate parameter-to-observable map at the mean wind, started from
/// the zero state.
pub fn mean_wind_surrogate(
    cfg: &RunConfig,
    grid: &GridSpec,
    net: &FlowNetParams,
    red: &Reduction,
) -> Result<SurrogateForward> {
    let op = ObservationOperator::new(grid, &cfg.sensor_locations(), cfg.sensors.sampling)?;
    let wbar = reduce_wind(&mean_wind(cfg, grid), &red.wind)?;
    SurrogateForward::new(net.clone(), &red.state, &op, wbar, &vec![0.0; grid.m()])
}

/// Approximation-error statistics over `b` fresh winds and prior sources.
pub fn estimate_bae_stats(
    cfg: &RunConfig,
    grid: &GridSpec,
    prior: &GaussianPrior,
    forward: &SurrogateForward,
    wind_basis: &PcaBasis,
) -> Result<BaeStats> {
    let scale = cfg.wind.variability.scale();
    bayes::estimate_bae(
        prior,
        forward,
        |l| {
            let p = sample_wind_params(derive_seed(cfg.seed, "bae-wind", l as u64), scale)?;
            forward.with_wind(reduce_wind(&WindField::from_params(&p, grid), wind_basis)?)
        },
        cfg.inversion.bae_samples,
        derive_seed(cfg.seed, "bae-source", 0),
        NoiseModel { sigma: cfg.sigma() },
    )
}

/// The mean-wind surrogate together with the prior and the test data.
#[derive(Clone, Debug)]
pub struct InversionContext {
    pub prior: GaussianPrior,
    pub forward: SurrogateForward,
    pub data: Vec<f64>,
}

pub fn data_models(cfg: &RunConfig, bae: BaeStats) -> [(&'static str, DataModel); 2] {
    [
        ("traditional", DataModel::Traditional(NoiseModel { sigma: cfg.sigma() })),
        ("bae", DataModel::Bae(bae)),
    ]
}

/// MAP point, Laplace posterior and samples of one data model.
#[derive(Clone, Debug)]
pub struct Inversion {
    pub map: MapResult,
    pub posterior: LaplacePosterior,
    pub samples: Vec<Vec<f64>>,
}

pub fn invert(cfg: &RunConfig, ctx: &InversionContext, model: &DataModel, stream: &str) -> Result<Inversion> {
    let problem = InverseProblem::new(&ctx.forward, &ctx.data, model, &ctx.prior)?;
    let map = bayes::compute_map(&problem, &ctx.prior.mean, cfg.inversion.map_tol, cfg.inversion.map_max_iters)?;
    let posterior = bayes::laplace_eig(
        &map.z,
        &problem,
        cfg.inversion.eig_max,
        cfg.inversion.eig_tol,
        derive_seed(cfg.seed, stream, 1),
    )?;
    let samples = draw_posterior(cfg, &posterior, &ctx.prior, stream);
    Ok(Inversion { map, posterior, samples })
}

pub fn draw_posterior(cfg: &RunConfig, posterior: &LaplacePosterior, prior: &GaussianPrior, stream: &str) -> Vec<Vec<f64>> {
    bayes::posterior_sample(
        posterior,
        prior,
        derive_seed(cfg.seed, stream, 2),
        cfg.inversion.posterior_samples,
    )
}

/// Quality of one inversion against the true source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InversionMetrics {
    pub map_rel_l2: f64,
    pub mahalanobis: f64,
}

pub fn inversion_metrics(inv: &Inversion, prior: &GaussianPrior, truth: &[f64]) -> InversionMetrics {
    InversionMetrics {
        map_rel_l2: linalg::rel_l2(&inv.map.z, truth),
        mahalanobis: bayes::mahalanobis(truth, &inv.posterior, prior),
    }
}

/// Groups curves greedily: each joins the first cluster whose founding
/// curve lies within relative ℓ² `radius`, else founds a new one.
pub fn cluster_curves(curves: &[Vec<f64>], radius: f64) -> Vec<usize> {
    // Indices of the founding curves, in cluster order.
    let mut founders: Vec<usize> = Vec::new();
    curves
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let found = founders
                .iter()
                .position(|&f| linalg::rel_l2(c, &curves[f]) <= radius);
            found.unwrap_or_else(|| {
                founders.push(k);
                founders.len() - 1
            })
        })
        .collect()
}

/// Restarted MAP estimation.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiStart {
    pub values: Vec<f64>,
    pub curves: Vec<Vec<f64>>,
    pub cluster_of: Vec<usize>,
    pub converged: Vec<bool>,
}

impl MultiStart {
    pub fn n_clusters(&self) -> usize {
        self.cluster_of.iter().max().map_or(0, |m| m + 1)
    }

    pub fn best(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest `(J − J_best)/|J_best|` over the restarts.
    pub fn worst_gap(&self) -> f64 {
        let b = self.best();
        self.values
            .iter()
            .map(|v| (v - b) / b.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

/// MAP points from `z̄ + s·(ζ − z̄)` with `ζ` drawn from the prior.
pub fn multi_start_map(cfg: &RunConfig, ctx: &InversionContext, model: &DataModel) -> Result<MultiStart> {
    let problem = InverseProblem::new(&ctx.forward, &ctx.data, model, &ctx.prior)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "restarts", 0));
    let mut out = MultiStart {
        values: vec![],
        curves: vec![],
        cluster_of: vec![],
        converged: vec![],
    };
    for _ in 0..cfg.inversion.restarts {
        let draw = ctx.prior.sample(&mut rng);
        let start: Vec<f64> = ctx
            .prior
            .mean
            .iter()
            .zip(&draw)
            .map(|(m, d)| m + cfg.inversion.restart_scale * (d - m))
            .collect();
        let map = bayes::compute_map(&problem, &start, cfg.inversion.map_tol, cfg.inversion.map_max_iters)?;
        out.values.push(map.value);
        out.converged.push(map.converged);
        out.curves.push(map.z);
    }
    out.cluster_of = cluster_curves(&out.curves, cfg.inversion.cluster_radius);
    Ok(out)
}

/// One row of the BAE-versus-traditional comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub case: String,
    pub mode: String,
    pub metrics: InversionMetrics,
}

/// Everything one variability case reports.
#[derive(Clone, Debug)]
pub struct CaseReport {
    pub reduction: (usize, usize, f64, f64),
    pub split_validation: Option<f64>,
    pub rows: Vec<MetricRow>,
    pub inversions: Vec<(String, Inversion)>,
    pub bae: BaeStats,
    pub truth: Vec<f64>,
    pub context: InversionContext,
}

/// Runs one case end to end in memory: ensemble, reduction, final
/// surrogate, BAE statistics and both inversions.
pub fn run_case(cfg: &RunConfig) -> Result<CaseReport> {
    let ensemble = build_ensemble(cfg)?;
    let ens = &ensemble.training;
    let dt = ens.grid.dt();
    let split = fit_split_reduction(cfg, ens)?;
    let split_validation = if cfg.study.validate_split {
        let (tr, va) = ens.split();
        let tc = run_train_config(cfg, cfg.train.horizon, cfg.train.epochs, "split", 0);
        let out = train_surrogate(&flow_dataset(ens, &split, &tr)?, Some(&flow_dataset(ens, &split, &va)?), &tc, dt)?;
        out.best_validation
    } else {
        None
    };
    let red = fit_full_reduction(ens, split.state.rank(), split.wind.rank())?;
    let all: Vec<usize> = (0..ens.trajectories.len()).collect();
    let tc = run_train_config(cfg, cfg.train.horizon, cfg.train.epochs, "final", 0);
    let net = train_surrogate(&flow_dataset(ens, &red, &all)?, None, &tc, dt)?.params;
    let prior = build_prior(cfg, &ens.grid)?;
    let forward = mean_wind_surrogate(cfg, &ens.grid, &net, &red)?;
    let bae = estimate_bae_stats(cfg, &ens.grid, &prior, &forward, &red.wind)?;
    let ctx = InversionContext {
        prior,
        forward,
        data: ensemble.test.observations.values.clone(),
    };
    let truth = ensemble.test.source.values.clone();
    let mut rows = vec![];
    let mut inversions = vec![];
    for (mode, model) in data_models(cfg, bae.clone()) {
        let inv = invert(cfg, &ctx, &model, mode)?;
        rows.push(MetricRow {
            case: cfg.wind.variability.name().into(),
            mode: mode.into(),
            metrics: inversion_metrics(&inv, &ctx.prior, &truth),
        });
        inversions.push((mode.to_string(), inv));
    }
    Ok(CaseReport {
        reduction: (split.state.rank(), split.wind.rank(), split.state_error, split.wind_error),
        split_validation,
        rows,
        inversions,
        bae,
        truth,
        context: ctx,
    })
}
