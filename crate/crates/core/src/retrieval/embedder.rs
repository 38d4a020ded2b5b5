//! Convolutional sketch autoencoder whose bottleneck is the retrieval
//! embedding.

use std::path::Path;

use candle_core::{Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{load_params, read_manifest, save_params};
use crate::nn::layers::{join, Conv2d, Linear, Parameterized, Tracking};
use crate::nn::ops::{leaky_relu, upsample2x};

pub const MIN_TRAINING_PATCHES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    /// Category name, or "global" for the whole-face contour embedder.
    pub name: String,
    /// Side of the square raster the encoder sees; a power of two >= 8.
    pub input_size: usize,
    pub bottleneck: usize,
    pub width: usize,
    pub seed: u64,
}

impl EmbedderConfig {
    pub fn component(name: &str) -> Self {
        Self {
            name: name.to_string(),
            input_size: 32,
            bottleneck: 64,
            width: 16,
            seed: 11,
        }
    }

    pub fn global() -> Self {
        Self {
            input_size: 64,
            ..Self::component("global")
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.input_size.is_power_of_two() || self.input_size < 8 || self.bottleneck == 0 || self.width == 0 {
            return Err(Error::Config(format!("invalid embedder layout {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderTraining {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of patches held out for the reconstruction gate.
    pub holdout: f64,
}

impl Default for EmbedderTraining {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 32,
            lr: 2e-3,
            seed: 5,
            holdout: 0.1,
        }
    }
}

/// Held-out reconstruction L1 before and after training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedderReport {
    pub untrained_l1: f64,
    pub trained_l1: f64,
}

impl EmbedderReport {
    pub fn passes(&self, ratio: f64) -> bool {
        self.trained_l1 <= ratio * self.untrained_l1
    }
}

#[derive(Debug, Clone)]
pub struct SketchEmbedder {
    config: EmbedderConfig,
    enc: Vec<Conv2d>,
    to_code: Linear,
    from_code: Linear,
    dec: Vec<Conv2d>,
    device: Device,
}

const DOWN: usize = 3;

impl SketchEmbedder {
    pub fn new(config: EmbedderConfig, dev: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = config.width;
        let chans = [1, w, 2 * w, 2 * w];
        let mut enc = Vec::new();
        for i in 0..DOWN {
            enc.push(Conv2d::new(&mut rng, chans[i], chans[i + 1], 3, 2, true, dev)?);
        }
        let s = config.input_size >> DOWN;
        let flat = chans[DOWN] * s * s;
        let to_code = Linear::new(&mut rng, flat, config.bottleneck, 0.0, 1.0, dev)?;
        let from_code = Linear::new(&mut rng, config.bottleneck, flat, 0.0, 1.0, dev)?;
        let mut dec = Vec::new();
        for i in (0..DOWN).rev() {
            let out = if i == 0 { 1 } else { chans[i] };
            dec.push(Conv2d::new(&mut rng, chans[i + 1], out, 3, 1, true, dev)?);
        }
        Ok(Self {
            config,
            enc,
            to_code,
            from_code,
            dec,
            device: dev.clone(),
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.bottleneck
    }

    /// (N, 1, S, S) rasters → (N, d) codes.
    fn encode_t(&self, x: &Tensor, t: Tracking) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.enc {
            h = leaky_relu(&c.forward(&h, t)?, 0.2, 1.0)?;
        }
        Ok(self.to_code.forward(&h.flatten_from(1)?, t)?)
    }

    fn decode_t(&self, code: &Tensor, t: Tracking) -> Result<Tensor> {
        let n = code.dim(0)?;
        let s = self.config.input_size >> DOWN;
        let c = 2 * self.config.width;
        let mut h = leaky_relu(&self.from_code.forward(code, t)?, 0.2, 1.0)?.reshape((n, c, s, s))?;
        let last = self.dec.len() - 1;
        for (i, conv) in self.dec.iter().enumerate() {
            h = conv.forward(&upsample2x(&h)?, t)?;
            h = if i == last {
                candle_nn::ops::sigmoid(&h)?
            } else {
                leaky_relu(&h, 0.2, 1.0)?
            };
        }
        Ok(h)
    }

    fn batch(&self, rasters: &[&[f32]]) -> Result<Tensor> {
        let s = self.config.input_size;
        let mut v = Vec::with_capacity(rasters.len() * s * s);
        for r in rasters {
            if r.len() != s * s {
                return Err(Error::Dimension(format!(
                    "raster has {} pixels, embedder expects {s}×{s}",
                    r.len()
                )));
            }
            v.extend_from_slice(r);
        }
        Ok(Tensor::from_vec(v, (rasters.len(), 1, s, s), &self.device)?)
    }

    /// Codes for `input_size²` rasters, one row per raster. Each raster is
    /// embedded on its own so results never depend on batching.
    pub fn embed(&self, rasters: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        rasters
            .iter()
            .map(|r| Ok(self.encode_t(&self.batch(&[r])?, Tracking::Frozen)?.flatten_all()?.to_vec1::<f32>()?))
            .collect()
    }

    pub fn reconstruct(&self, rasters: &[&[f32]]) -> Result<Tensor> {
        let x = self.batch(rasters)?;
        self.decode_t(&self.encode_t(&x, Tracking::Frozen)?, Tracking::Frozen)
    }

    pub fn reconstruction_l1(&self, rasters: &[&[f32]]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in rasters.chunks(64) {
            let x = self.batch(chunk)?;
            let y = self.reconstruct(chunk)?;
            total += (x - y)?.abs()?.mean_all()?.to_scalar::<f32>()? as f64 * chunk.len() as f64;
        }
        Ok(total / rasters.len().max(1) as f64)
    }

    /// L1 autoencoding of `patches` (each `input_size²`); the report's gate
    /// values come from the held-out tail.
    pub fn train(&mut self, patches: &[Vec<f32>], opts: EmbedderTraining) -> Result<EmbedderReport> {
        if patches.len() < MIN_TRAINING_PATCHES {
            return Err(Error::Data(format!(
                "embedder corpus has {} patches, needs at least {MIN_TRAINING_PATCHES}",
                patches.len()
            )));
        }
        let mut idx: Vec<usize> = (0..patches.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        idx.shuffle(&mut rng);
        let n_hold = ((patches.len() as f64 * opts.holdout).round() as usize).max(1);
        let (hold, train) = idx.split_at(n_hold);
        let held: Vec<&[f32]> = hold.iter().map(|&i| patches[i].as_slice()).collect();
        let untrained_l1 = self.reconstruction_l1(&held)?;
        let vars: Vec<Var> = self.named_params("").into_iter().map(|(_, v)| v).collect();
        let mut opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: opts.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut order = train.to_vec();
        let mut cursor = order.len();
        for step in 0..opts.steps {
            let mut b = Vec::with_capacity(opts.batch);
            while b.len() < opts.batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                b.push(patches[order[cursor]].as_slice());
                cursor += 1;
            }
            let x = self.batch(&b)?;
            let y = self.decode_t(&self.encode_t(&x, Tracking::Trainable)?, Tracking::Trainable)?;
            let loss = (x - y)?.abs()?.mean_all()?;
            let v = loss.to_scalar::<f32>()?;
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("embedder loss is {v}"),
                });
            }
            opt.backward_step(&loss)?;
        }
        Ok(EmbedderReport {
            untrained_l1,
            trained_l1: self.reconstruction_l1(&held)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(path, "embedder", serde_json::to_value(&self.config)?, &self.named_params("embedder"))
    }

    pub fn load(path: &Path, dev: &Device) -> Result<Self> {
        let cfg: EmbedderConfig = serde_json::from_value(read_manifest(path)?.meta)?;
        let e = Self::new(cfg, dev)?;
        load_params(path, "embedder", &e.named_params("embedder"))?;
        Ok(e)
    }
}

impl Parameterized for SketchEmbedder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        self.enc.visit(&join(prefix, "enc"), f);
        self.to_code.visit(&join(prefix, "to_code"), f);
        self.from_code.visit(&join(prefix, "from_code"), f);
        self.dec.visit(&join(prefix, "dec"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_few_patches_is_a_data_error() {
        let mut e = SketchEmbedder::new(EmbedderConfig::component("nose"), &Device::Cpu).unwrap();
        let p = vec![vec![0.0; 32 * 32]; 99];
        assert!(matches!(e.train(&p, EmbedderTraining::default()), Err(Error::Data(_))));
    }

    #[test]
    fn save_load_preserves_embeddings() {
        let e = SketchEmbedder::new(EmbedderConfig::component("mouth"), &Device::Cpu).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ckpt");
        e.save(&path).unwrap();
        let back = SketchEmbedder::load(&path, &Device::Cpu).unwrap();
        let r: Vec<f32> = (0..1024).map(|i| (i % 7 == 0) as u8 as f32).collect();
        assert_eq!(e.embed(&[&r]).unwrap(), back.embed(&[&r]).unwrap());
        assert_eq!(back.config(), e.config());
    }
}
