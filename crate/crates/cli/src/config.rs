//! Per-subcommand JSON configuration. Every field has a default, and
//! unknown keys are rejected before any work starts.

use std::collections::BTreeMap;
use std::path::PathBuf;

use irm_core::cmnist::{CmnistConfig, ColorConfig};
use irm_core::learners::TrainConfig;
use irm_core::sem::SetupCode;
use irm_core::theory::SuiteConfig;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeConfig {
    pub seed: u64,
    pub sigma_sq: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub points: usize,
    pub ridge: f64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self { seed: 0, sigma_sq: 1.0, c_min: -4.0, c_max: 4.0, points: 801, ridge: 1.0 }
    }
}

impl LandscapeConfig {
    pub fn grid(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.c_min];
        }
        let step = (self.c_max - self.c_min) / (self.points - 1) as f64;
        (0..self.points).map(|i| if i + 1 == self.points { self.c_max } else { self.c_min + step * i as f64 }).collect()
    }
}

/// ERM and ICP see every environment in `envs`. IRM trains on all but the
/// last and picks λ by squared risk on the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub setups: Vec<String>,
    pub dim: usize,
    pub n_per_env: usize,
    pub envs: Vec<f64>,
    pub seeds: usize,
    pub lambda_grid: Vec<f64>,
    pub irm_steps: usize,
    pub irm_learning_rate: f64,
    pub alpha: f64,
    pub icp_max_dim: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            setups: SetupCode::all().iter().map(ToString::to_string).collect(),
            dim: 10,
            n_per_env: 1000,
            envs: vec![0.2, 2.0, 5.0],
            seeds: 5,
            lambda_grid: vec![1.0, 10.0, 100.0, 1e3, 1e4],
            irm_steps: 50_000,
            irm_learning_rate: 1e-3,
            alpha: 0.05,
            icp_max_dim: irm_core::baselines::DEFAULT_MAX_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmnistRunConfig {
    pub seed: u64,
    pub runs: usize,
    pub colors: ColorConfig,
    pub train: TrainConfig,
    pub calibration_bins: usize,
    /// Directory holding the four uncompressed IDX files. Falls back to
    /// `IRM_MNIST_DIR`.
    pub mnist_dir: Option<PathBuf>,
    /// Accepted for completeness; files are never downloaded.
    pub download_url: Option<String>,
    /// File name → expected lowercase hex digest.
    pub sha256: BTreeMap<String, String>,
}

impl Default for CmnistRunConfig {
    fn default() -> Self {
        let core = CmnistConfig::default();
        Self {
            seed: core.seed,
            runs: core.runs,
            colors: core.colors,
            train: core.train,
            calibration_bins: core.calibration_bins,
            mnist_dir: None,
            download_url: None,
            sha256: BTreeMap::new(),
        }
    }
}

impl CmnistRunConfig {
    pub fn core(&self) -> CmnistConfig {
        CmnistConfig {
            runs: self.runs,
            seed: self.seed,
            colors: self.colors,
            train: self.train.clone(),
            calibration_bins: self.calibration_bins,
        }
    }
}

pub type TheoryConfig = SuiteConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpConfig {
    pub seed: u64,
    pub setup: String,
    pub dim: usize,
    pub n_per_env: usize,
    pub envs: Vec<f64>,
    pub alpha: f64,
    pub max_dim: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            setup: "FEU".into(),
            dim: 5,
            n_per_env: 1000,
            envs: vec![0.2, 2.0, 5.0],
            alpha: 0.05,
            max_dim: irm_core::baselines::DEFAULT_MAX_DIM,
        }
    }
}

/// Parses `text` (or the defaults when `None`) and validates the result.
pub fn parse<T: DeserializeOwned + Default>(text: Option<&str>) -> Result<T, CliError> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| CliError::Config(e.to_string())),
    }
}

fn check(ok: bool, msg: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(msg.to_string()))
    }
}

fn positive_scales(envs: &[f64]) -> bool {
    envs.iter().all(|&e| e > 0.0 && e.is_finite())
}

pub trait Validate {
    fn validate(&self) -> Result<(), CliError>;
    fn set_seed(&mut self, seed: u64);
}

impl Validate for LandscapeConfig {
    fn validate(&self) -> Result<(), CliError> {
        check(self.points >= 1, "points must be at least 1")?;
        check(self.sigma_sq > 0.0 && self.sigma_sq.is_finite(), "sigma_sq must be positive")?;
        check(self.c_min.is_finite() && self.c_max.is_finite() && self.c_min <= self.c_max, "need c_min ≤ c_max")?;
        check(self.ridge >= 0.0 && self.ridge.is_finite(), "ridge must be non-negative")
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

impl Validate for SyntheticConfig {
    fn validate(&self) -> Result<(), CliError> {
        check(!self.setups.is_empty(), "setups must not be empty")?;
        for s in &self.setups {
            s.parse::<SetupCode>().map_err(|e| CliError::Config(e.to_string()))?;
        }
        check(self.dim >= 1, "dim must be positive")?;
        check(self.n_per_env >= 2, "n_per_env must be at least 2")?;
        check(self.envs.len() >= 3, "envs needs at least two training scales and one validation scale")?;
        check(positive_scales(&self.envs), "environment scales must be positive")?;
        check(self.seeds >= 1, "seeds must be positive")?;
        check(!self.lambda_grid.is_empty(), "lambda_grid must not be empty")?;
        check(self.lambda_grid.iter().all(|&l| l >= 0.0 && l.is_finite()), "lambda_grid entries must be non-negative")?;
        check(self.irm_steps >= 1, "irm_steps must be positive")?;
        check(self.irm_learning_rate > 0.0, "irm_learning_rate must be positive")?;
        check(self.alpha > 0.0 && self.alpha < 1.0, "alpha must lie in (0, 1)")
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

impl Validate for CmnistRunConfig {
    fn validate(&self) -> Result<(), CliError> {
        check(self.runs >= 1, "runs must be positive")?;
        check(self.calibration_bins >= 2, "calibration_bins must be at least 2")?;
        let probs = self.colors.env_flip_probs.iter().chain([&self.colors.label_noise]);
        check(probs.clone().all(|p| (0.0..=1.0).contains(p)), "probabilities must lie in [0, 1]")?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

impl Validate for TheoryConfig {
    fn validate(&self) -> Result<(), CliError> {
        check(self.sigma_sq.len() >= 2, "sigma_sq needs at least two environments")?;
        check(positive_scales(&self.sigma_sq), "sigma_sq entries must be positive")?;
        check(self.kkt_tolerance > 0.0, "kkt_tolerance must be positive")?;
        check(self.round_trip_max_dim >= 1, "round_trip_max_dim must be positive")
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

impl Validate for IcpConfig {
    fn validate(&self) -> Result<(), CliError> {
        self.setup.parse::<SetupCode>().map_err(|e| CliError::Config(e.to_string()))?;
        check(self.dim >= 1, "dim must be positive")?;
        check(self.n_per_env >= 3, "n_per_env must be at least 3")?;
        check(self.envs.len() >= 2, "envs needs at least two scales")?;
        check(positive_scales(&self.envs), "environment scales must be positive")?;
        check(self.alpha > 0.0 && self.alpha < 1.0, "alpha must lie in (0, 1)")
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}
