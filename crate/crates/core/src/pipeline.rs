//! File-based pipeline stages.
//!
//! Each stage reads containers from an input directory, writes containers
//! and a manifest to an output directory, and records the hash of every file
//! it touched. Case stages live in `<root>/<case>/`; `report` works on the
//! root. Because a manifest embeds the full configuration, any stage can be
//! replayed from it and its outputs compared byte for byte.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::bayes::{BaeStats, DataModel, LaplacePosterior, NoiseModel};
use crate::config::{RunConfig, Variability};
use crate::dispersion::{SourceMagnitude, StateTrajectory, WindParams};
use crate::error::{Error, Result};
use crate::experiments::{self as ex, InversionContext, Reduction, TrainingData};
use crate::flownet::{Activation, FlowNetParams, Normalization};
use crate::io::{self, fmt_num, Array, Manifest, Plot, Series, SeriesStyle};
use crate::observe::ObservationSet;
use crate::reduction::PcaBasis;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "PLUME_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Reduce,
    Train,
    Bae,
    Invert,
    Sample,
    Study,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Generate,
        Stage::Reduce,
        Stage::Train,
        Stage::Bae,
        Stage::Invert,
        Stage::Sample,
        Stage::Study,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Reduce => "reduce",
            Stage::Train => "train",
            Stage::Bae => "bae",
            Stage::Invert => "invert",
            Stage::Sample => "sample",
            Stage::Study => "study",
            Stage::Report => "report",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown stage {name:?}")))
    }

    /// Whether the stage works in a case directory rather than the root.
    pub fn per_case(self) -> bool {
        self != Stage::Report
    }
}

pub fn case_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(cfg.wind.variability.name())
}

/// Tracks the files one stage reads and writes.
struct StageIo<'a> {
    input: &'a Path,
    output: &'a Path,
    manifest: Manifest,
    hash: String,
}

impl<'a> StageIo<'a> {
    fn new(stage: Stage, cfg: &RunConfig, input: &'a Path, output: &'a Path) -> Self {
        let hash = cfg.hash();
        Self {
            input,
            output,
            manifest: Manifest::new(stage.name(), cfg.seed, cfg.to_toml(), hash.clone()),
            hash,
        }
    }

    fn read_bytes(&mut self, rel: &str) -> Result<Vec<u8>> {
        let path = self.input.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!(
                "missing input {} (run the stage that produces it first)",
                path.display()
            )),
            _ => Error::Io(e),
        })?;
        if !self.manifest.inputs.iter().any(|r| r.path == rel) {
            self.manifest.inputs.push(io::FileRecord {
                path: rel.to_string(),
                sha256: io::sha256_hex(&bytes),
            });
        }
        Ok(bytes)
    }

    fn read(&mut self, rel: &str) -> Result<Array> {
        let bytes = self.read_bytes(rel)?;
        Array::decode(&bytes, rel)
    }

    fn read_vec(&mut self, rel: &str, len: usize) -> Result<Vec<f64>> {
        let a = self.read(rel)?;
        a.expect_shape(&[len])?;
        Ok(a.data)
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        Manifest::record(&mut self.manifest.outputs, self.output, &self.output.join(rel))
    }

    fn write(&mut self, rel: &str, array: &Array) -> Result<()> {
        io::save_array(&self.output.join(rel), array)?;
        self.record(rel)
    }

    fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        io::write_atomic(&self.output.join(rel), text.as_bytes())?;
        self.record(rel)
    }

    fn write_csv(&mut self, rel: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        io::write_csv(&self.output.join(rel), &self.hash, header, rows)?;
        self.record(rel)
    }

    fn plot(&mut self, rel: &str, plot: &Plot) -> Result<()> {
        io::emit_plot(plot, &self.output.join(rel))?;
        self.record(rel)?;
        let csv = Path::new(rel).with_extension("csv");
        self.record(&csv.to_string_lossy())
    }

    fn metric(&mut self, key: impl Into<String>, value: f64) {
        self.manifest.metrics.insert(key.into(), value);
    }

    fn note(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.manifest.notes.insert(key.into(), value.into());
    }

    fn finish(self) -> Result<Manifest> {
        let path = self.output.join(Manifest::file_name(&self.manifest.stage));
        self.manifest.save(&path)?;
        Ok(self.manifest)
    }
}

const WIND_PARAMS_LEN: usize = 10;

fn wind_params_row(p: &WindParams) -> Vec<f64> {
    let mut v = p.theta.to_vec();
    v.push(p.variability_scale);
    v
}

fn wind_params_from(row: &[f64]) -> WindParams {
    let mut theta = [0.0; 9];
    theta.copy_from_slice(&row[..9]);
    WindParams {
        theta,
        variability_scale: row[9],
    }
}

fn traj_file(k: usize, j: usize) -> String {
    format!("ensemble/traj_{k}_{j}.arr")
}

fn run_generate(io: &mut StageIo, cfg: &RunConfig) -> Result<()> {
    let ens = ex::build_ensemble(cfg)?;
    let td = &ens.training;
    let (n, m) = (td.grid.n_steps, td.grid.m());
    for k in 0..td.n_winds() {
        for j in 0..td.n_sources() {
            let t = &td.trajectories[td.index(k, j)];
            io.write(
                &traj_file(k, j),
                &Array::new(format!("state wind {k} source {j}"), vec![n + 1, m], t.values.clone())?,
            )?;
        }
    }
    let sources: Vec<f64> = td.sources.iter().flat_map(|s| s.values.iter().copied()).collect();
    io.write("ensemble/sources.arr", &Array::new("training sources", vec![td.n_sources(), n], sources)?)?;
    let winds: Vec<f64> = td.wind_params.iter().flat_map(wind_params_row).collect();
    io.write(
        "ensemble/wind_params.arr",
        &Array::new("training wind parameters", vec![td.n_winds(), WIND_PARAMS_LEN], winds)?,
    )?;
    io.write(
        "ensemble/test_wind_params.arr",
        &Array::vector("test wind parameters", wind_params_row(&ens.test.wind_params)),
    )?;
    io.write("ensemble/test_source.arr", &Array::vector("test source", ens.test.source.values.clone()))?;
    let obs = &ens.test.observations;
    io.write(
        "ensemble/observations.arr",
        &Array::new("test observations", vec![obs.n_steps, obs.n_obs], obs.values.clone())?,
    )?;
    for (k, d) in ens.wind_distances.iter().enumerate() {
        io.metric(format!("wind_distance_ratio_{k}"), *d);
        io.metric(format!("wind_distance_{k}"), d.sqrt());
    }
    io.metric("test_wind_distance_ratio", ens.test_wind_distance);
    io.metric("test_wind_distance", ens.test_wind_distance.sqrt());
    for (k, d) in ens.test_to_training.iter().enumerate() {
        io.metric(format!("test_to_training_{k}"), *d);
    }
    io.metric("trajectories", td.trajectories.len() as f64);
    Ok(())
}

fn load_training(io: &mut StageIo, cfg: &RunConfig) -> Result<TrainingData> {
    let grid = cfg.grid_spec()?;
    let (n, m) = (grid.n_steps, grid.m());
    let n_sources = cfg.sources.training.len();
    let n_winds = cfg.wind.training_winds;
    let src = io.read("ensemble/sources.arr")?;
    src.expect_shape(&[n_sources, n])?;
    let sources = src
        .data
        .chunks_exact(n)
        .map(|c| SourceMagnitude::new(c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let wp = io.read("ensemble/wind_params.arr")?;
    wp.expect_shape(&[n_winds, WIND_PARAMS_LEN])?;
    let wind_params = wp.data.chunks_exact(WIND_PARAMS_LEN).map(wind_params_from).collect();
    let mut trajectories = Vec::with_capacity(n_winds * n_sources);
    for k in 0..n_winds {
        for j in 0..n_sources {
            let a = io.read(&traj_file(k, j))?;
            a.expect_shape(&[n + 1, m])?;
            trajectories.push(StateTrajectory {
                m,
                n_steps: n,
                values: a.data,
            });
        }
    }
    Ok(TrainingData {
        grid,
        sources,
        wind_params,
        trajectories,
    })
}

fn write_basis(io: &mut StageIo, prefix: &str, b: &PcaBasis) -> Result<()> {
    io.write(&format!("{prefix}_mean.arr"), &Array::vector(format!("{prefix} mean"), b.mean.clone()))?;
    io.write(&format!("{prefix}_basis.arr"), &Array::from_matrix(format!("{prefix} basis"), &b.basis))?;
    io.write(
        &format!("{prefix}_singular_values.arr"),
        &Array::vector(format!("{prefix} singular values"), b.singular_values.clone()),
    )
}

fn read_basis(io: &mut StageIo, prefix: &str) -> Result<PcaBasis> {
    let basis = io.read(&format!("{prefix}_basis.arr"))?.to_matrix()?;
    let mean = io.read_vec(&format!("{prefix}_mean.arr"), basis.nrows())?;
    let singular_values = io.read_vec(&format!("{prefix}_singular_values.arr"), basis.ncols())?;
    Ok(PcaBasis {
        mean,
        basis,
        singular_values,
    })
}

fn read_reduction(io: &mut StageIo, which: &str) -> Result<Reduction> {
    Ok(Reduction {
        state: read_basis(io, &format!("reduce/{which}_state"))?,
        wind: read_basis(io, &format!("reduce/{which}_wind"))?,
        state_error: f64::NAN,
        wind_error: f64::NAN,
    })
}

fn run_reduce(io: &mut StageIo, cfg: &RunConfig) -> Result<()> {
    let td = load_training(io, cfg)?;
    let split = ex::fit_split_reduction(cfg, &td)?;
    let full = ex::fit_full_reduction(&td, split.state.rank(), split.wind.rank())?;
    for (which, red) in [("split", &split), ("final", &full)] {
        write_basis(io, &format!("reduce/{which}_state"), &red.state)?;
        write_basis(io, &format!("reduce/{which}_wind"), &red.wind)?;
    }
    io.metric("state_rank", split.state.rank() as f64);
    io.metric("wind_rank", split.wind.rank() as f64);
    io.metric("state_validation_error", split.state_error);
    io.metric("wind_validation_error", split.wind_error);
    io.metric("state_final_error", full.state_error);
    io.metric("wind_final_error", full.wind_error);
    Ok(())
}

fn history_text(history: &[(usize, f64)]) -> String {
    let mut out = String::from("# epoch loss\n");
    for (e, l) in history {
        out.push_str(&format!("{e} {}\n", fmt_num(*l)));
    }
    out
}

fn write_network(io: &mut StageIo, net: &FlowNetParams) -> Result<()> {
    let act = match net.activation {
        Activation::Elu => 0.0,
        Activation::Identity => 1.0,
    };
    let meta = vec![net.r as f64, net.r_w as f64, net.width() as f64, net.depth() as f64, net.dt, act];
    io.write("train/net_meta.arr", &Array::vector("r r_w width depth dt activation", meta))?;
    let norm: Vec<f64> = [&net.norm.input_shift, &net.norm.input_scale, &net.norm.output_scale]
        .into_iter()
        .flatten()
        .copied()
        .collect();
    io.write("train/net_norm.arr", &Array::vector("input shift, input scale, output scale", norm))?;
    io.write("train/net_params.arr", &Array::vector("flow net parameters", net.flatten()))
}

fn read_network(io: &mut StageIo) -> Result<FlowNetParams> {
    let meta = io.read_vec("train/net_meta.arr", 6)?;
    let bad = || Error::Header("train/net_meta.arr: invalid architecture".into());
    if meta[..4].iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
        return Err(bad());
    }
    let (r, rw, width, depth) = (meta[0] as usize, meta[1] as usize, meta[2] as usize, meta[3] as usize);
    let mut net = FlowNetParams::new(r, rw, width, depth, meta[4], 0);
    net.activation = match meta[5] {
        0.0 => Activation::Elu,
        1.0 => Activation::Identity,
        _ => return Err(bad()),
    };
    let n_in = net.n_in();
    let norm = io.read_vec("train/net_norm.arr", 2 * n_in + r)?;
    net.norm = Normalization {
        input_shift: norm[..n_in].to_vec(),
        input_scale: norm[n_in..2 * n_in].to_vec(),
        output_scale: norm[2 * n_in..].to_vec(),
    };
    let xi = io.read_vec("train/net_params.arr", net.num_params())?;
    net.set_flat(&xi)?;
    Ok(net)
}

fn run_train(io: &mut StageIo, cfg: &RunConfig) -> Result<()> {
    let td = load_training(io, cfg)?;
    let dt = td.grid.dt();
    if cfg.study.validate_split {
        let split = read_reduction(io, "split")?;
        let (tr, va) = td.split();
        let tc = ex::run_train_config(cfg, cfg.train.horizon, cfg.train.epochs, "split", 0);
        let out = ex::train_surrogate(
            &ex::flow_dataset(&td, &split, &tr)?,
            Some(&ex::flow_dataset(&td, &split, &va)?),
            &tc,
            dt,
        )?;
        io.write_text("train/split_history.txt", &history_text(&out.history))?;
        let rows: Vec<Vec<String>> = out
            .validation
            .iter()
            .map(|(e, v)| vec![e.to_string(), fmt_num(*v)])
            .collect();
        io.write_csv("train/split_validation.csv", &["epoch", "validation_error"], &rows)?;
        if let (Some(e), Some(v)) = (out.best_epoch, out.best_validation) {
            io.metric("split_best_epoch", e as f64);
            io.metric("split_validation_error", v);
        }
    }
    let red = read_reduction(io, "final")?;
    let all: Vec<usize> = (0..td.trajectories.len()).collect();
    let tc = ex::run_train_config(cfg, cfg.train.horizon, cfg.train.epochs, "final", 0);
    let out = ex::train_surrogate(&ex::flow_dataset(&td, &red, &all)?, None, &tc, dt)?;
    io.write_text("train/history.txt", &history_text(&out.history))?;
    write_network(io, &out.params)?;
    if let Some((_, l)) = out.history.last() {
        io.metric("final_loss", *l);
    }
    io.metric("parameters", out.params.num_params() as f64);
    Ok(())
}

/// Network, final reduction, prior and mean-wind surrogate.
struct Surrogate {
    red: Reduction,
    prior: crate::bayes::GaussianPrior,
    forward: crate::observe::SurrogateForward,
    grid: crate::dispersion::GridSpec,
}

fn load_surrogate(io: &mut StageIo, cfg: &RunConfig) -> Result<Surrogate> {
    let grid = cfg.grid_spec()?;
    let net = read_network(io)?;
    let red = read_reduction(io, "final")?;
    let forward = ex::mean_wind_surrogate(cfg, &grid, &net, &red)?;
    Ok(Surrogate {
        prior: ex::build_prior(cfg, &grid)?,
        red,
        forward,
        grid,
    })
}

fn run_bae(io: &mut StageIo, cfg: &RunConfig) -> Result<()> {
    let s = load_surrogate(io, cfg)?;
    let stats = ex::estimate_bae_stats(cfg, &s.grid, &s.prior, &s.forward, &s.red.wind)?;
    io.write("bae/mean_error.arr", &Array::vector("approximation error mean", stats.mean_error.clone()))?;
    io.write("bae/cov_error.arr", &Array::from_matrix("approximation error covariance", &stats.cov_error))?;
    io.metric("samples", stats.samples as f64);
    io.metric("mean_error_norm", crate::linalg::norm(&stats.mean_error));
    io.metric("cov_error_trace", stats.cov_error.trace());
    io.metric("jitter", stats.jitter);
    Ok(())
}

fn read_bae(io: &mut StageIo, cfg: &RunConfig, dim: usize) -> Result<BaeStats> {
    let mean = io.read_vec("bae/mean_error.arr", dim)?;
    let cov = io.read("bae/cov_error.arr")?;
    cov.expect_shape(&[dim, dim])?;
    BaeStats::from_moments(mean, cov.to_matrix()?, cfg.inversion.bae_samples, NoiseModel { sigma: cfg.sigma() })
}

fn read_observations(io: &mut StageIo, cfg: &RunConfig) -> Result<ObservationSet> {
    let n_obs = cfg.sensors.locations.len();
    let n = cfg.grid.n_steps;
    let a = io.read("ensemble/observations.arr")?;
    a.expect_shape(&[n, n_obs])?;
    Ok(ObservationSet {
        n_obs,
        n_steps: n,
        values: a.data,
    })
}

fn inversion_setup(io: &mut StageIo, cfg: &RunConfig) -> Result<(InversionContext, [(&'static str, DataModel); 2])> {
    let s = load_surrogate(io, cfg)?;
    let obs = read_observations(io, cfg)?;
    let bae = read_bae(io, cfg, obs.values.len())?;
    let ctx = InversionContext {
        prior: s.prior,
        forward: s.forward,
        data: obs.values,
    };
    Ok((ctx, ex::data_models(cfg, bae)))
}

fn run_invert(io: &mut StageIo, cfg: &RunConfig) -> Result<()> {
    let (ctx, models) = inversion_setup(io, cfg)?;
    let n = cfg.grid.n_steps;
    let truth = io.read_vec("ensemble/test_source.arr", n)?;
    for (mode, model) in &models {
        let inv = ex::invert(cfg, &ctx, model, mode)?;
        let met = ex::inversion_metrics(&inv, &ctx.prior, &truth);
        io.write(&format!("invert/{mode}_map.arr"), &Array::vector(format!("{mode} MAP"), inv.map.z.clone()))?;
        io.write(
            &format!("invert/{mode}_eigenvalues.arr"),
            &Array::vector(format!("{mode} eigenvalues"), inv.posterior.eigenvalues.clone()),
        )?;
        io.write(
            &format!("invert/{mode}_eigenvectors.arr"),
            &Array::from_matrix(format!("{mode} eigenvectors"), &inv.posterior.eigenvectors),
        )?;
        io.metric(format!("{mode}_map_rel_l2"), met.map_rel_l2);
        io.metric(format!("{mode}_mahalanobis"), met.mahalanobis);
        io.metric(format!("{mode}_objective"), inv.map.value);
        io.metric(format!("{mode}_newton_iterations"), inv.map.iterations as f64);
        io.metric(format!("{mode}_rank"), inv.posterior.rank() as f64);
        io.note(format!("{mode}_converged"), inv.map.converged.to_string());
    }
    Ok(())
}

fn read_posterior(io: &mut StageIo, mode: &str, n: usize) -> Result<LaplacePosterior> {
    let z_map = io.read_vec(&format!("invert/{mode}_map.arr"), n)?;
    let vecs = io.read(&format!("invert/{mode}_eigenvectors.arr"))?;
    let eigenvectors = if vecs.shape == [n, 0] {
        DMatrix::zeros(n, 0)
    } else {
        vecs.to_matrix()?
    };
    let eigenvalues = io.read_vec(&format!("invert/{mode}_eigenvalues.arr"), eigenvectors.ncols())?;
    Ok(LaplacePosterior {
        z_map,
        eigenvalues,
        eigenvectors,
    })
}

fn run_sample(io: &mut StageIo, cfg: &RunConfig) -> Result<()> {
    let grid = cfg.grid_spec()?;
    let prior = ex::build_prior(cfg, &grid)?;
    let n = grid.n_steps;
    let truth = io.read_vec("ensemble/test_source.arr", n)?;
    let t: Vec<f64> = (0..n).map(|k| grid.time(k)).collect();
    for mode in ["traditional", "bae"] {
        let post = read_posterior(io, mode, n)?;
        let samples = ex::draw_posterior(cfg, &post, &prior, mode);
        let flat: Vec<f64> = samples.iter().flatten().copied().collect();
        io.write(
            &format!("sample/{mode}_samples.arr"),
            &Array::new(format!("{mode} posterior samples"), vec![samples.len(), n], flat)?,
        )?;
        let mut series: Vec<Series> = samples
            .iter()
            .enumerate()
            .map(|(k, s)| Series::line(format!("sample {k}"), SeriesStyle::Sample, t.clone(), s.clone()))
            .collect();
        series.push(Series::line("MAP", SeriesStyle::Line, t.clone(), post.z_map.clone()));
        series.push(Series::line("truth", SeriesStyle::Truth, t.clone(), truth.clone()));
        io.plot(
            &format!("sample/{mode}_posterior.svg"),
            &Plot {
                title: format!("{} posterior, {} wind variability", mode, cfg.wind.variability.name()),
                x_label: "time (min)".into(),
                y_label: "source magnitude".into(),
                config_hash: cfg.hash(),
                series,
            },
        )?;
        let spread = pointwise_std(&samples);
        io.metric(format!("{mode}_mean_pointwise_std"), spread.iter().sum::<f64>() / n as f64);
    }
    Ok(())
}

fn pointwise_std(samples: &[Vec<f64>]) -> Vec<f64> {
    let n = samples.first().map_or(0, |s| s.len());
    let count = samples.len() as f64;
    (0..n)
        .map(|k| {
            let mean = samples.iter().map(|s| s[k]).sum::<f64>() / count;
            (samples.iter().map(|s| (s[k] - mean).powi(2)).sum::<f64>() / (count - 1.0).max(1.0)).sqrt()
        })
        .collect()
}

fn run_study(io: &mut StageIo, cfg: &RunConfig) -> Result<()> {
    if !cfg.study.p_values.is_empty() {
        let td = load_training(io, cfg)?;
        let split = read_reduction(io, "split")?;
        let (tr, va) = td.split();
        let rows = ex::sweep_horizon(
            cfg,
            &ex::flow_dataset(&td, &split, &tr)?,
            &ex::flow_dataset(&td, &split, &va)?,
            td.grid.dt(),
            &cfg.study.p_values,
            cfg.study.seeds,
        )?;
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                let errs: Vec<String> = r.errors.iter().map(|e| fmt_num(*e)).collect();
                vec![
                    r.horizon.to_string(),
                    fmt_num(r.mean()),
                    fmt_num(r.min()),
                    fmt_num(r.max()),
                    errs.join(";"),
                ]
            })
            .collect();
        io.write_csv("study/p_sweep.csv", &["P", "mean", "min", "max", "per_seed"], &table)?;
        io.plot(
            "study/p_sweep.svg",
            &Plot {
                title: format!("validation error by composition horizon ({} seeds)", cfg.study.seeds),
                x_label: "P".into(),
                y_label: "validation error".into(),
                config_hash: cfg.hash(),
                series: vec![Series::error_bars(
                    "mean, min to max",
                    rows.iter().map(|r| r.horizon as f64).collect(),
                    rows.iter().map(SweepRowExt::finite_mean).collect(),
                    rows.iter().map(|r| r.min()).collect(),
                    rows.iter().map(SweepRowExt::finite_max).collect(),
                )],
            },
        )?;
        for r in &rows {
            io.metric(format!("sweep_mean_p{}", r.horizon), r.mean());
        }
    }

    let (ctx, models) = inversion_setup(io, cfg)?;
    let (_, bae) = &models[1];
    let ms = ex::multi_start_map(cfg, &ctx, bae)?;
    let n = cfg.grid.n_steps;
    let flat: Vec<f64> = ms.curves.iter().flatten().copied().collect();
    io.write(
        "study/multistart_curves.arr",
        &Array::new("restart MAP points", vec![ms.curves.len(), n], flat)?,
    )?;
    let rows: Vec<Vec<String>> = (0..ms.values.len())
        .map(|k| {
            vec![
                k.to_string(),
                fmt_num(ms.values[k]),
                ms.cluster_of[k].to_string(),
                ms.converged[k].to_string(),
            ]
        })
        .collect();
    io.write_csv("study/multistart.csv", &["restart", "objective", "cluster", "converged"], &rows)?;
    io.metric("multistart_clusters", ms.n_clusters() as f64);
    io.metric("multistart_worst_gap", ms.worst_gap());
    io.metric("multistart_best", ms.best());
    Ok(())
}

/// Plotting helpers that keep diverged seeds off the axes.
trait SweepRowExt {
    fn finite_mean(&self) -> f64;
    fn finite_max(&self) -> f64;
}

impl SweepRowExt for ex::SweepRow {
    fn finite_mean(&self) -> f64 {
        let f: Vec<f64> = self.errors.iter().copied().filter(|e| e.is_finite()).collect();
        f.iter().sum::<f64>() / f.len().max(1) as f64
    }

    fn finite_max(&self) -> f64 {
        self.errors.iter().copied().filter(|e| e.is_finite()).fold(0.0, f64::max)
    }
}

fn run_report(io: &mut StageIo) -> Result<()> {
    let mut rows = vec![];
    let mut restarts = vec![];
    for case in [Variability::Lesser, Variability::Greater] {
        let rel = format!("{}/{}", case.name(), Manifest::file_name("invert"));
        if io.input.join(&rel).exists() {
            let m = parse_manifest(&io.read_bytes(&rel)?, &rel)?;
            for mode in ["traditional", "bae"] {
                let get = |k: &str| {
                    m.metrics
                        .get(&format!("{mode}_{k}"))
                        .copied()
                        .ok_or_else(|| Error::Config(format!("{rel} lacks {mode}_{k}")))
                };
                rows.push(vec![
                    case.name().to_string(),
                    mode.to_string(),
                    fmt_num(get("map_rel_l2")?),
                    fmt_num(get("mahalanobis")?),
                ]);
            }
        }
        let rel = format!("{}/{}", case.name(), Manifest::file_name("study"));
        if io.input.join(&rel).exists() {
            let m = parse_manifest(&io.read_bytes(&rel)?, &rel)?;
            if let (Some(c), Some(g)) = (m.metrics.get("multistart_clusters"), m.metrics.get("multistart_worst_gap")) {
                restarts.push(vec![case.name().to_string(), fmt_num(*c), fmt_num(*g)]);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "no finished inversions under {}",
            io.input.display()
        )));
    }
    io.write_csv("report/metrics.csv", &["case", "mode", "map_rel_l2", "mahalanobis"], &rows)?;
    if !restarts.is_empty() {
        io.write_csv("report/multistart.csv", &["case", "clusters", "worst_gap"], &restarts)?;
    }
    Ok(())
}

fn parse_manifest(bytes: &[u8], label: &str) -> Result<Manifest> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Header(format!("{label}: not utf-8")))?;
    toml::from_str(text).map_err(|e| Error::Config(format!("{label}: {e}")))
}

/// Runs one stage, reading from `input` and writing to `output` (both case
/// directories, or both roots for `report`).
pub fn run_stage(stage: Stage, cfg: &RunConfig, input: &Path, output: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut io = StageIo::new(stage, cfg, input, output);
    match stage {
        Stage::Generate => run_generate(&mut io, cfg)?,
        Stage::Reduce => run_reduce(&mut io, cfg)?,
        Stage::Train => run_train(&mut io, cfg)?,
        Stage::Bae => run_bae(&mut io, cfg)?,
        Stage::Invert => run_invert(&mut io, cfg)?,
        Stage::Sample => run_sample(&mut io, cfg)?,
        Stage::Study => run_study(&mut io, cfg)?,
        Stage::Report => run_report(&mut io)?,
    }
    io.finish()
}

/// Runs `stage` in its usual place under `root`.
pub fn run_in_root(stage: Stage, cfg: &RunConfig, root: &Path) -> Result<Manifest> {
    let dir = if stage.per_case() { case_dir(root, cfg) } else { root.to_path_buf() };
    run_stage(stage, cfg, &dir, &dir)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayOutcome {
    pub stage: String,
    pub matched: Vec<String>,
    pub mismatched: Vec<String>,
}

impl ReplayOutcome {
    pub fn identical(&self) -> bool {
        self.mismatched.is_empty()
    }
}

/// Reruns the stage recorded in `manifest_path` against the same inputs,
/// writing into `output`, and compares every output hash.
pub fn replay(manifest_path: &Path, output: &Path) -> Result<ReplayOutcome> {
    let original = Manifest::load(manifest_path)?;
    let input = manifest_path.parent().unwrap_or(Path::new("."));
    original.verify_inputs(input)?;
    let cfg = RunConfig::from_toml(&original.config)?;
    let stage = Stage::parse(&original.stage)?;
    if same_dir(input, output) {
        return Err(Error::Config("replay output must differ from the original directory".into()));
    }
    let rerun = run_stage(stage, &cfg, input, output)?;
    let fresh: BTreeSet<(&str, &str)> = rerun
        .outputs
        .iter()
        .map(|r| (r.path.as_str(), r.sha256.as_str()))
        .collect();
    let mut outcome = ReplayOutcome {
        stage: original.stage.clone(),
        matched: vec![],
        mismatched: vec![],
    };
    for rec in &original.outputs {
        if fresh.contains(&(rec.path.as_str(), rec.sha256.as_str())) {
            outcome.matched.push(rec.path.clone());
        } else {
            outcome.mismatched.push(rec.path.clone());
        }
    }
    if rerun.outputs.len() != original.outputs.len() {
        outcome.mismatched.push("<output set differs>".into());
    }
    Ok(outcome)
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}
