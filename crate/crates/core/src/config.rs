//! Run configuration: one TOML document drives every pipeline stage.
//!
//! Every section has defaults, so an empty file is a valid desk-scale
//! configuration for the lesser-variability case. Unknown keys are errors.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dispersion::{self, GridSpec, PhysicalParams, GREATER_VARIABILITY, LESSER_VARIABILITY};
use crate::error::{Error, Result};
use crate::flownet::TrainConfig;
use crate::observe::{default_sensors, Sampling};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variability {
    Lesser,
    Greater,
}

impl Variability {
    pub fn scale(self) -> f64 {
        match self {
            Variability::Lesser => LESSER_VARIABILITY,
            Variability::Greater => GREATER_VARIABILITY,
        }
    }

    /// Noise standard deviation used for this case.
    pub fn default_sigma(self) -> f64 {
        match self {
            Variability::Lesser => 5.0,
            Variability::Greater => 8.5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variability::Lesser => "lesser",
            Variability::Greater => "greater",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub n_steps: usize,
    pub final_time: f64,
    /// Derived from the stability bound when absent.
    pub substeps_per_node: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        let g = GridSpec::desk();
        Self {
            nx: g.nx,
            ny: g.ny,
            n_steps: g.n_steps,
            final_time: g.final_time,
            substeps_per_node: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindConfig {
    pub variability: Variability,
    /// Candidates drawn for the training and for the test selection.
    pub pool_size: usize,
    pub training_winds: usize,
}

impl Default for WindConfig {
    fn default() -> Self {
        Self {
            variability: Variability::Lesser,
            pool_size: 200,
            training_winds: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    /// `(η₁, η₂)` of the training sources.
    pub training: Vec<[f64; 2]>,
    pub test: [f64; 2],
    /// Multiplicative noise on the test observations.
    pub test_noise: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            training: vec![[2.0, 0.5], [2.0, 2.0], [3.5, 0.5], [3.5, 2.0]],
            test: [2.75, 1.25],
            test_noise: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaConfig {
    /// Fixed ranks; when absent the error targets pick the rank.
    pub state_rank: Option<usize>,
    pub wind_rank: Option<usize>,
    pub state_error_target: f64,
    pub wind_error_target: f64,
    pub max_rank: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            state_rank: None,
            wind_rank: None,
            state_error_target: 0.01,
            wind_error_target: 0.01,
            max_rank: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub locations: Vec<[f64; 2]>,
    pub sampling: Sampling,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            locations: default_sensors().into_iter().map(|(x, y)| [x, y]).collect(),
            sampling: Sampling::Bilinear,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Explicit operator constants; calibrated from the targets when absent.
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub correlation_time: f64,
    pub std: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            gamma: None,
            delta: None,
            correlation_time: 15.0,
            std: 3000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    /// Noise standard deviation; the variability case decides when absent.
    pub sigma: Option<f64>,
    pub bae_samples: usize,
    pub map_tol: f64,
    pub map_max_iters: usize,
    pub eig_tol: f64,
    pub eig_max: usize,
    pub posterior_samples: usize,
    pub restarts: usize,
    pub restart_scale: f64,
    /// Relative ℓ² radius within which restart MAP points are merged.
    pub cluster_radius: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            sigma: None,
            bae_samples: 50,
            map_tol: 1e-6,
            map_max_iters: 60,
            eig_tol: 0.01,
            eig_max: 120,
            posterior_samples: 100,
            restarts: 20,
            restart_scale: 0.5,
            cluster_radius: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub p_values: Vec<usize>,
    pub seeds: usize,
    /// Epochs of each sweep run; the final model uses `train.epochs`.
    pub epochs: usize,
    /// Train on the tuning split and report its validation error before
    /// the final fit on every solve.
    pub validate_split: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            p_values: vec![1, 5, 15, 25],
            seeds: 3,
            epochs: 1000,
            validate_split: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub physics: PhysicalParams,
    pub wind: WindConfig,
    pub sources: SourceConfig,
    pub pca: PcaConfig,
    pub train: TrainConfig,
    pub sensors: SensorConfig,
    pub prior: PriorConfig,
    pub inversion: InversionConfig,
    pub study: StudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 20_240_601,
            grid: GridConfig::default(),
            physics: PhysicalParams::default(),
            wind: WindConfig::default(),
            sources: SourceConfig::default(),
            pca: PcaConfig::default(),
            train: TrainConfig::default(),
            sensors: SensorConfig::default(),
            prior: PriorConfig::default(),
            inversion: InversionConfig::default(),
            study: StudyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn for_case(variability: Variability) -> Self {
        let mut cfg = Self::default();
        cfg.wind.variability = variability;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.physics.validate()?;
        self.grid_spec()?;
        self.train.validate()?;
        if self.wind.training_winds == 0 || self.wind.training_winds > self.wind.pool_size {
            return bad(format!(
                "wind: training_winds must be in 1..={}",
                self.wind.pool_size
            ));
        }
        if self.sources.training.is_empty() {
            return bad("sources: at least one training source is required".into());
        }
        let positive = |e: &[f64; 2]| e[0] > 0.0 && e[1] > 0.0;
        if !self.sources.training.iter().all(positive) || !positive(&self.sources.test) {
            return bad("sources: eta values must be positive".into());
        }
        if self.wind.training_winds * self.sources.training.len() < 2 {
            return bad("at least two training trajectories are required".into());
        }
        if self.sensors.locations.is_empty() {
            return bad("sensors: at least one location is required".into());
        }
        if self.inversion.bae_samples < 2 {
            return bad("inversion: bae_samples must be at least 2".into());
        }
        if self.inversion.restarts == 0 {
            return bad("inversion: restarts must be at least 1".into());
        }
        if self.study.p_values.iter().any(|p| *p == 0) || self.study.seeds == 0 {
            return bad("study: P values and seed count must be positive".into());
        }
        if self.prior.gamma.is_some() != self.prior.delta.is_some() {
            return bad("prior: gamma and delta must be given together".into());
        }
        if self.prior.gamma.is_none() {
            // Calibration measures the correlation at this lag from mid-window.
            let g = self.grid_spec()?;
            let lag = (self.prior.correlation_time / g.dt()).round() as usize;
            if lag == 0 || g.n_steps / 2 + lag >= g.n_steps {
                return bad(format!(
                    "prior: correlation_time {} must span between one step and half the window",
                    self.prior.correlation_time
                ));
            }
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        let g = &self.grid;
        match g.substeps_per_node {
            Some(s) => GridSpec::new(g.nx, g.ny, g.n_steps, g.final_time, s),
            None => GridSpec::with_auto_substeps(
                g.nx,
                g.ny,
                g.n_steps,
                g.final_time,
                &self.physics,
                dispersion::wind_speed_bound(self.wind.variability.scale()),
            ),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.inversion
            .sigma
            .unwrap_or_else(|| self.wind.variability.default_sigma())
    }

    pub fn sensor_locations(&self) -> Vec<(f64, f64)> {
        self.sensors.locations.iter().map(|l| (l[0], l[1])).collect()
    }
}
