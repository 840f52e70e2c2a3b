//! The pipeline configuration file: one TOML document with a table per
//! module. Every key is optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::csi::{DenoiseConfig, SanitizeConfig};
use crate::error::{Error, Result};
use crate::fingerprint::{ProposalConfig, QueryConfig};
use crate::hypothesis::HypothesisConfig;
use crate::nn::{ModelConfig, TrainParams};
use crate::pipeline::{DatasetConfig, LocalizeConfig, StageConfigs};
use crate::sim::{CsiFieldConfig, WalkSimConfig};
use crate::walk::FilterConfig;

/// Overrides `seed` when set.
pub const SEED_ENV: &str = "CSILOC_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Convolutions over warped proposals, then the LSTM.
    CnnLstm,
    /// The LSTM alone over raw fingerprints.
    LstmOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub sequence_length: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { kind: ModelKind::CnnLstm, sequence_length: 4 }
    }
}

/// Knobs of the synthetic evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Day of the test walks; the survey is on day 0.
    pub test_day: f64,
    /// Measurement noise of test walks when it differs from the survey's.
    pub test_noise_sd: Option<f64>,
    pub walks: usize,
    /// Optimizer steps per model. Overrides `train.epochs` so that models
    /// trained on datasets of different sizes get the same budget.
    pub train_updates: Option<usize>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { test_day: 44.0, test_noise_sd: None, walks: 8, train_updates: Some(3000) }
    }
}

/// Default locations of stage inputs and outputs, relative to the working
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub model: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_dir: "data".into(), model: "model.json".into(), output_dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Every component seed is derived from this one.
    pub seed: u64,
    pub paths: Paths,
    pub field: CsiFieldConfig,
    pub walk: WalkSimConfig,
    pub sanitize: SanitizeConfig,
    pub denoise: DenoiseConfig,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub train: TrainParams,
    pub proposals: ProposalConfig,
    pub query: QueryConfig,
    pub localize: LocalizeConfig,
    pub hypothesis: HypothesisConfig,
    pub filter: FilterConfig,
    pub experiment: ExperimentSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            field: CsiFieldConfig { drift_per_day: 0.01, ..CsiFieldConfig::default() },
            walk: WalkSimConfig::default(),
            sanitize: SanitizeConfig::default(),
            denoise: DenoiseConfig::default(),
            dataset: DatasetConfig { sequence_stride: 2, ..DatasetConfig::default() },
            model: ModelSection::default(),
            train: TrainParams::default(),
            proposals: ProposalConfig::default(),
            query: QueryConfig::default(),
            localize: LocalizeConfig::default(),
            hypothesis: HypothesisConfig::default(),
            filter: FilterConfig::default(),
            experiment: ExperimentSection::default(),
        }
        .seeded(0)
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config { field: "toml".into(), message: e.message().to_string() })?;
        let seed = cfg.seed;
        Ok(cfg.seeded(seed))
    }

    /// Reads `path` (defaults when `None`), applies the seed override from
    /// the environment and validates.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let cfg: Self = toml::from_str(&text).map_err(|e| Error::Parse {
                    path: p.to_path_buf(),
                    line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
                    message: e.message().to_string(),
                })?;
                let seed = cfg.seed;
                cfg.seeded(seed)
            }
            None => Self::default(),
        };
        let cfg = cfg.with_env_seed()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_env_seed(self) -> Result<Self> {
        match std::env::var(SEED_ENV) {
            Ok(s) => {
                let seed = s.trim().parse().map_err(|_| Error::config(SEED_ENV, format!("not an unsigned integer: {s:?}")))?;
                Ok(self.seeded(seed))
            }
            Err(_) => Ok(self),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("toml", e.to_string()))
    }

    /// Sets the global seed and derives every component seed from it.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.field.seed = seed;
        self.train.seed = seed.wrapping_add(1);
        self.hypothesis.seed = seed.wrapping_add(2);
        self.filter.seed = seed.wrapping_add(3);
        self.walk.seed = seed.wrapping_add(4);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.walk.validate()?;
        self.denoise.validate()?;
        self.dataset.validate()?;
        self.train.validate()?;
        self.localize.validate()?;
        self.hypothesis.validate()?;
        self.filter.validate()?;
        self.model_config().validate()?;
        if self.proposals.sizes.is_empty() || self.proposals.sizes.contains(&0) {
            return Err(Error::config("proposals.sizes", "need at least one positive size"));
        }
        if self.query.window_ms <= 0 {
            return Err(Error::config("query.window_ms", "must be positive"));
        }
        if !(self.experiment.test_day >= 0.0) {
            return Err(Error::config("experiment.test_day", "must be >= 0"));
        }
        if self.experiment.test_noise_sd.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::config("experiment.test_noise_sd", "must be >= 0"));
        }
        if self.experiment.train_updates == Some(0) {
            return Err(Error::config("experiment.train_updates", "must be positive"));
        }
        Ok(())
    }

    pub fn stages(&self) -> StageConfigs {
        StageConfigs {
            proposals: self.proposals.clone(),
            query: self.query.clone(),
            localize: self.localize.clone(),
            hypothesis: self.hypothesis.clone(),
            filter: self.filter.clone(),
        }
    }

    /// Network shape for the configured kind, grid and layout.
    pub fn model_config(&self) -> ModelConfig {
        let classes = self.field.grid.n_cells() + 1;
        let channels = self.field.layout.channels();
        let mut cfg = match self.model.kind {
            ModelKind::CnnLstm => {
                let (u, v) = self.proposals.warp_to;
                ModelConfig::cnn_lstm((u, v, channels), classes)
            }
            ModelKind::LstmOnly => ModelConfig::lstm_only(channels, classes),
        };
        cfg.sequence_length = self.model.sequence_length;
        cfg
    }

    /// Spatial size of one model input step.
    pub fn input_warp(&self) -> (usize, usize) {
        match self.model.kind {
            ModelKind::CnnLstm => self.proposals.warp_to,
            ModelKind::LstmOnly => (1, 1),
        }
    }
}
