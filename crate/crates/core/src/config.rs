//! TOML run configuration shared by the command-line tools.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SyntheticConfig;
use crate::error::{Error, Result};
use crate::inference::{BlendMode, BLEND_ANGLES, SMOOTH_WINDOW};
use crate::training::{TrainConfig, FIVE_STAGE_EPOCHS, THREE_STAGE_EPOCHS};

/// TCIR-format input.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub container: Option<PathBuf>,
    pub meta: Option<PathBuf>,
    /// Crop and pool frames to this edge length on load.
    pub image_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub blend: BlendMode,
    pub n_angles: usize,
    pub smooth_window: usize,
    pub batch_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            blend: BlendMode::Mean,
            n_angles: BLEND_ANGLES,
            smooth_window: SMOOTH_WINDOW,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    /// Used when no container is given.
    pub synthetic: SyntheticConfig,
    pub train: TrainConfig,
    pub five_stage_epochs: [usize; 5],
    pub three_stage_epochs: [usize; 3],
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            train: TrainConfig::default(),
            five_stage_epochs: FIVE_STAGE_EPOCHS,
            three_stage_epochs: THREE_STAGE_EPOCHS,
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// `path` when given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// One seed for every random stream: network init, batching, augmentation
    /// and synthetic data.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synthetic.rng_seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.inference.n_angles == 0 || self.inference.smooth_window == 0 || self.inference.batch_size == 0 {
            return Err(Error::Config("inference n_angles, smooth_window and batch_size must be positive".into()));
        }
        if self.data.container.is_some() != self.data.meta.is_some() {
            return Err(Error::Config("data.container and data.meta go together".into()));
        }
        Ok(())
    }
}
