//! Tiny fully convolutional per-pixel label classifier.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::ColorImage;
use crate::error::{Error, Result};
use crate::model::checkpoint::{load_params, save_params};
use crate::nn::layers::{join, Conv2d, Parameterized, Tracking};
use crate::nn::ops::leaky_relu;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub classes: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            width: 24,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmenterTraining {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SegmenterTraining {
    fn default() -> Self {
        Self {
            steps: 400,
            batch: 8,
            lr: 3e-3,
            seed: 3,
        }
    }
}

/// RGB plus two coordinate channels through a stack of dilated 3×3
/// convolutions (dilations 1, 2, 4, 8) and a 1×1 classifier.
#[derive(Debug, Clone)]
pub struct Segmenter {
    config: SegmenterConfig,
    layers: Vec<Conv2d>,
    head: Conv2d,
    trained: bool,
    device: Device,
}

impl Segmenter {
    pub fn new(config: SegmenterConfig, dev: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = config.width;
        let mut layers = Vec::new();
        let mut c = 5;
        for d in [1, 2, 4, 8] {
            layers.push(Conv2d::new(&mut rng, c, w, 3, 1, true, dev)?.with_dilation(d));
            c = w;
        }
        Ok(Self {
            config,
            head: Conv2d::new(&mut rng, w, config.classes, 1, 1, true, dev)?,
            layers,
            trained: false,
            device: dev.clone(),
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn config(&self) -> SegmenterConfig {
        self.config
    }

    fn inputs(&self, images: &[&ColorImage]) -> Result<Tensor> {
        let x = ColorImage::batch_tensor(images, &self.device)?;
        let (b, _, h, w) = x.dims4()?;
        let xs: Vec<f32> = (0..h * w).map(|i| ((i % w) as f32 + 0.5) / w as f32 * 2.0 - 1.0).collect();
        let ys: Vec<f32> = (0..h * w).map(|i| ((i / w) as f32 + 0.5) / h as f32 * 2.0 - 1.0).collect();
        let coords = Tensor::cat(
            &[Tensor::from_vec(xs, (1, 1, h, w), &self.device)?, Tensor::from_vec(ys, (1, 1, h, w), &self.device)?],
            1,
        )?
        .broadcast_as((b, 2, h, w))?
        .contiguous()?;
        Ok(Tensor::cat(&[x, coords], 1)?)
    }

    fn logits(&self, x: &Tensor, t: Tracking) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = leaky_relu(&l.forward(&h, t)?, 0.2, 1.0)?;
        }
        Ok(self.head.forward(&h, t)?)
    }

    /// Cross-entropy training on exact label maps; returns the last batch loss.
    pub fn train(&mut self, data: &[(&ColorImage, &[u8])], opts: SegmenterTraining) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Data("no segmentation samples".into()));
        }
        let vars: Vec<Var> = self.named_params("").into_iter().map(|(_, v)| v).collect();
        let mut opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: opts.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = order.len();
        let mut last = f64::NAN;
        let classes = self.config.classes;
        for _ in 0..opts.steps {
            let mut idx = Vec::with_capacity(opts.batch);
            while idx.len() < opts.batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let imgs: Vec<&ColorImage> = idx.iter().map(|&i| data[i].0).collect();
            let x = self.inputs(&imgs)?;
            let target: Vec<u32> = idx.iter().flat_map(|&i| data[i].1.iter().map(|&l| l as u32)).collect();
            let target = Tensor::from_vec(target, target_len(&imgs), &self.device)?;
            let logits = self.logits(&x, Tracking::Trainable)?;
            let flat = logits.permute((0, 2, 3, 1))?.reshape(((), classes))?;
            let loss = candle_nn::loss::cross_entropy(&flat, &target)?;
            opt.backward_step(&loss)?;
            last = loss.to_scalar::<f32>()? as f64;
            if !last.is_finite() {
                return Err(Error::Divergence {
                    step: 0,
                    detail: "segmenter loss is not finite".into(),
                });
            }
        }
        self.trained = true;
        Ok(last)
    }

    pub fn predict(&self, images: &[&ColorImage]) -> Result<Vec<Vec<u8>>> {
        if !self.trained {
            return Err(Error::State("segmenter has not been trained".into()));
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let logits = self.logits(&self.inputs(chunk)?, Tracking::Frozen)?;
            let am = logits.argmax(1)?.to_dtype(DType::U32)?;
            for i in 0..chunk.len() {
                let v = am.get(i)?.flatten_all()?.to_vec1::<u32>()?;
                out.push(v.into_iter().map(|l| l as u8).collect());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.trained {
            return Err(Error::State("refusing to save an untrained segmenter".into()));
        }
        save_params(path, "segmenter", serde_json::to_value(self.config)?, &self.named_params("segmenter"))
    }

    pub fn load(path: &Path, dev: &Device) -> Result<Self> {
        let m = crate::model::checkpoint::read_manifest(path)?;
        let cfg: SegmenterConfig = serde_json::from_value(m.meta)?;
        let mut s = Self::new(cfg, dev)?;
        load_params(path, "segmenter", &s.named_params("segmenter"))?;
        s.trained = true;
        Ok(s)
    }
}

fn target_len(imgs: &[&ColorImage]) -> usize {
    imgs.iter().map(|i| i.res * i.res).sum()
}

/// Labels for one image.
pub fn extract_labels(img: &ColorImage, segmenter: &Segmenter) -> Result<Vec<u8>> {
    Ok(segmenter.predict(&[img])?.pop().unwrap())
}

pub fn pixel_accuracy(pred: &[u8], truth: &[u8]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

impl Parameterized for Segmenter {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        self.layers.visit(&join(prefix, "layers"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrained_segmenter_is_a_state_error() {
        let s = Segmenter::new(SegmenterConfig::default(), &Device::Cpu).unwrap();
        let img = ColorImage::filled(16, [0.5; 3]);
        assert!(matches!(extract_labels(&img, &s), Err(Error::State(_))));
    }
}
