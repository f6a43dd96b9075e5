//! TOML run configuration shared by all commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::TimingParams;
use crate::device::DeviceParams;
use crate::energy::EnergyParams;
use crate::nn::train::{TrainConfig, TrainSetup};
use crate::nn::NetworkSpec;
use crate::pruning::PruneConfig;

pub const SEED_ENV: &str = "CIM_SIM_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("a seed is required (config `seed` or {SEED_ENV})")]
    MissingSeed,
    #[error("{SEED_ENV}={0:?} is not an unsigned integer")]
    BadSeedEnv(String),
}

/// Missing sections take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub device: DeviceParams,
    pub timing: TimingParams,
    pub prune: PruneConfig,
    pub train: TrainConfig,
    pub energy: EnergyParams,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.device.validate().map_err(|e| invalid(e.to_string()))?;
        self.timing.validate().map_err(invalid)?;
        self.prune.validate().map_err(|e| invalid(e.to_string()))?;
        self.train.validate().map_err(|e| invalid(e.to_string()))?;
        self.energy.validate().map_err(invalid)?;
        Ok(())
    }

    /// The seed in force: the environment override if set, else the config.
    pub fn seed(&self) -> Result<Option<u64>, ConfigError> {
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map(Some).map_err(|_| ConfigError::BadSeedEnv(v)),
            Err(_) => Ok(self.seed),
        }
    }

    pub fn require_seed(&self) -> Result<u64, ConfigError> {
        self.seed()?.ok_or(ConfigError::MissingSeed)
    }

    pub fn train_setup(&self, seed: u64) -> TrainSetup {
        TrainSetup {
            spec: NetworkSpec::task1(),
            train: self.train.clone(),
            prune: self.prune.clone(),
            device: self.device.clone(),
            timing: self.timing.clone(),
            seed,
            faults: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.device.program_sigma, 0.8793);
    }

    #[test]
    fn sections_override_and_unknown_keys_fail() {
        let cfg = RunConfig::from_toml_str(
            "seed = 42\n[device]\nn_levels = 16\n[prune]\ndistance_threshold = 0.4\nnormalized = true\n[train]\nepochs = 2\nhardware_mode = \"SoftwareOracle\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(42));
        assert_eq!(cfg.device.n_levels, 16);
        assert!(cfg.prune.normalized);
        assert_eq!(cfg.train.epochs, 2);
        assert!(matches!(RunConfig::from_toml_str("[device]\nsigma = 1.0\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::from_toml_str("bogus = 1\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::from_toml_str("[train]\nepochs = 0\n"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml_str("[device]\nn_levels = 1\n"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn missing_seed_is_reported() {
        // The env override is exercised by the CLI tests, which run in their
        // own processes.
        if std::env::var(SEED_ENV).is_err() {
            assert!(matches!(RunConfig::default().require_seed(), Err(ConfigError::MissingSeed)));
            assert_eq!(RunConfig { seed: Some(3), ..Default::default() }.require_seed().unwrap(), 3);
        }
    }
}
