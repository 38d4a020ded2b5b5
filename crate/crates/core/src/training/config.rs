use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossWeights};
use crate::model::{EncoderConfig, GeneratorConfig, Modality};

/// Conditional training run; every field has a desk default so a TOML file
/// need only name what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_interval: usize,
    pub weights: LossWeights,
    pub modality: Modality,
    /// Overrides the generator's injection resolution.
    pub replacement_res: Option<usize>,
    pub patch_count: usize,
    pub patch_size: Option<usize>,
    pub dataset: Option<PathBuf>,
    pub generator: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            checkpoint_interval: 1000,
            weights: LossWeights::default(),
            modality: Modality::Both,
            replacement_res: None,
            patch_count: 20,
            patch_size: None,
            dataset: None,
            generator: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        self.weights.validate()
    }

    /// The generator layout this run trains against.
    pub fn generator_config(&self, base: &GeneratorConfig) -> Result<GeneratorConfig> {
        let g = match self.replacement_res {
            Some(r) => base.with_replacement(r),
            None => base.clone(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn encoder_config(&self, g: &GeneratorConfig) -> Result<EncoderConfig> {
        let e = EncoderConfig {
            condition_res: g.max_res,
            modality: self.modality,
            ..EncoderConfig::desk()
        };
        e.validate(g)?;
        Ok(e)
    }

    pub fn loss_config(&self, g: &GeneratorConfig) -> Result<LossConfig> {
        let mut l = LossConfig::for_generator(g);
        l.patch_count = self.patch_count;
        if let Some(p) = self.patch_size {
            l.patch_size = p;
        }
        l.validate(g)?;
        Ok(l)
    }
}
