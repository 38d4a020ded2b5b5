//! Test-set reconstruction metrics in the layout of the reference tables.

use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::sc::condition_batch;
use crate::data::{ColorImage, TrainingSample};
use crate::error::{Error, Result};
use crate::losses::{global_perceptual, l1_loss, local_perceptual, LossConfig, PerceptualExtractor};
use crate::metrics::{compute_psnr, compute_ssim, desk_fid};
use crate::model::{ScModel, StyleCode};
use crate::nn::layers::Tracking;

pub const CSV_HEADER: &str = "config,L1,Local,Global,desk-FID,SSIM,PSNR";

/// Crop seed shared by every evaluation so rows are comparable.
pub const EVAL_CROP_SEED: u64 = 20;

const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub config: String,
    #[serde(rename = "L1")]
    pub l1: f64,
    #[serde(rename = "Local")]
    pub local: f64,
    #[serde(rename = "Global")]
    pub global: f64,
    #[serde(rename = "desk-FID")]
    pub desk_fid: f64,
    #[serde(rename = "SSIM")]
    pub ssim: f64,
    #[serde(rename = "PSNR")]
    pub psnr: f64,
}

impl EvalRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4}",
            self.config, self.l1, self.local, self.global, self.desk_fid, self.ssim, self.psnr
        )
    }
}

pub fn to_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Scores `predict` (a batch of samples → (B, 3, H, W) in [−1, 1]) against
/// the samples' stored images.
pub fn evaluate_with(
    name: &str,
    test: &[&TrainingSample],
    loss: &LossConfig,
    extractor: &PerceptualExtractor,
    mut predict: impl FnMut(&[&TrainingSample]) -> Result<Tensor>,
) -> Result<EvalRow> {
    if test.len() < 2 {
        return Err(Error::Data("evaluation needs at least two test samples".into()));
    }
    let dev = candle_core::Device::Cpu;
    let (mut l1, mut local, mut global, mut ssim, mut psnr) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let scalar = |t: Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    for chunk in test.chunks(CHUNK) {
        let imgs: Vec<&ColorImage> = chunk.iter().map(|s| &s.image).collect();
        let gt = ColorImage::batch_tensor(&imgs, &dev)?;
        let pred = predict(chunk)?.to_device(&dev)?.clamp(-1f32, 1f32)?;
        let n = chunk.len() as f64;
        l1 += n * scalar(l1_loss(&gt, &pred)?)?;
        local += n * scalar(local_perceptual(&gt, &pred, extractor, loss.patch_count, loss.patch_size, EVAL_CROP_SEED)?)?;
        global += n * scalar(global_perceptual(&gt, &pred, extractor, loss.global_resize)?)?;
        let unit = |t: &Tensor| -> Result<Tensor> { Ok(((t + 1.0)? * 0.5)?) };
        let (gu, pu) = (unit(&gt)?, unit(&pred)?);
        for i in 0..chunk.len() {
            let (a, b) = (gu.get(i)?, pu.get(i)?);
            ssim += compute_ssim(&a, &b)?;
            psnr += compute_psnr(&a, &b, 1.0)?;
        }
        preds.push(pred);
        gts.push(gt);
    }
    let n = test.len() as f64;
    let fid = desk_fid(&Tensor::cat(&preds, 0)?, &Tensor::cat(&gts, 0)?, extractor)?;
    Ok(EvalRow {
        config: name.to_string(),
        l1: l1 / n,
        local: local / n,
        global: global / n,
        desk_fid: fid,
        ssim: ssim / n,
        psnr: psnr / n,
    })
}

/// The model's output for each sample's conditions and recorded low codes.
pub fn reconstruct(model: &ScModel, samples: &[&TrainingSample]) -> Result<Tensor> {
    let split = model.generator_config().high_style_count();
    let codes: Vec<StyleCode> = samples
        .iter()
        .map(|s| s.require_style()?.clone().with_split(split))
        .collect::<Result<_>>()?;
    let refs: Vec<&StyleCode> = codes.iter().collect();
    let low = StyleCode::stack_low(&refs, model.device())?;
    let cond = condition_batch(model, samples)?;
    Ok(model.synthesize_batch(&cond, &low, Tracking::Frozen, false)?.0)
}

/// Reconstructs each test image from its conditions and its own recorded
/// low codes.
pub fn evaluate_reconstruction(
    name: &str,
    model: &ScModel,
    test: &[&TrainingSample],
    loss: &LossConfig,
    extractor: &PerceptualExtractor,
) -> Result<EvalRow> {
    evaluate_with(name, test, loss, extractor, |chunk| reconstruct(model, chunk))
}

/// Mean absolute pixel error of [`reconstruct`] over `test`; the L1 column
/// of [`evaluate_reconstruction`] without the other metrics.
pub fn reconstruction_l1(model: &ScModel, test: &[&TrainingSample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Data("no test samples".into()));
    }
    let mut total = 0.0;
    for chunk in test.chunks(CHUNK) {
        let imgs: Vec<&ColorImage> = chunk.iter().map(|s| &s.image).collect();
        let gt = ColorImage::batch_tensor(&imgs, model.device())?;
        let pred = reconstruct(model, chunk)?.clamp(-1f32, 1f32)?;
        let l = l1_loss(&gt, &pred)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        total += l * chunk.len() as f64;
    }
    Ok(total / test.len() as f64)
}

/// Upper bound: the generator's own intermediates injected back.
pub fn evaluate_oracle(
    model: &ScModel,
    test: &[&TrainingSample],
    loss: &LossConfig,
    extractor: &PerceptualExtractor,
) -> Result<EvalRow> {
    let split = model.generator_config().high_style_count();
    evaluate_with("oracle", test, loss, extractor, |chunk| {
        let codes: Vec<StyleCode> = chunk
            .iter()
            .map(|s| s.require_style()?.clone().with_split(split))
            .collect::<Result<_>>()?;
        let refs: Vec<&StyleCode> = codes.iter().collect();
        let styles = StyleCode::stack(&refs, model.device())?;
        let pair = model.generator.synthesize_prefix(&styles, Tracking::Frozen, None)?;
        let low = StyleCode::stack_low(&refs, model.device())?;
        model.generator.inject_intermediates(&pair, &low)
    })
}

/// Pixelwise mean of the training images.
pub fn mean_image(train: &[&TrainingSample]) -> Result<ColorImage> {
    let first = train.first().ok_or_else(|| Error::Data("no training images".into()))?;
    let mut m = ColorImage::filled(first.image.res, [0.0; 3]);
    for s in train {
        if s.image.res != m.res {
            return Err(Error::Data("training images differ in resolution".into()));
        }
        for (a, b) in m.data.iter_mut().zip(&s.image.data) {
            *a += b;
        }
    }
    let n = train.len() as f32;
    m.data.iter_mut().for_each(|v| *v /= n);
    Ok(m)
}

/// Predicting the training-set mean image for every test sample.
pub fn evaluate_mean_baseline(
    train: &[&TrainingSample],
    test: &[&TrainingSample],
    loss: &LossConfig,
    extractor: &PerceptualExtractor,
) -> Result<EvalRow> {
    let mean = mean_image(train)?;
    let dev = candle_core::Device::Cpu;
    let t = mean.to_tensor(&dev)?;
    evaluate_with("mean-image-baseline", test, loss, extractor, |chunk| {
        Ok(t.broadcast_as((chunk.len(), 3, mean.res, mean.res))?.contiguous()?)
    })
}
