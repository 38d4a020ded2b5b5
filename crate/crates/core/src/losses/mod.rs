//! Reconstruction objective: L1, global and local perceptual distances, and
//! generator-block feature matching.

mod extractor;

pub use extractor::{PerceptualExtractor, DEFAULT_EXTRACTOR_SEED};

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::{BlockTrace, GeneratorConfig};
use crate::nn::ops::resize_bilinear;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_gp: f64,
    pub lambda_lp: f64,
    pub lambda_fm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 1.0,
            lambda_gp: 1.0,
            lambda_lp: 1.0,
            lambda_fm: 1.0,
        }
    }
}

impl LossWeights {
    pub fn only_l1() -> Self {
        Self {
            lambda_l1: 1.0,
            lambda_gp: 0.0,
            lambda_lp: 0.0,
            lambda_fm: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_l1, self.lambda_gp, self.lambda_lp, self.lambda_fm];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub patch_count: usize,
    pub patch_size: usize,
    pub global_resize: usize,
    pub fm_levels: Vec<u32>,
    #[serde(default)]
    pub crop_seed: u64,
}

impl LossConfig {
    pub fn for_generator(g: &GeneratorConfig) -> Self {
        Self {
            patch_count: 20,
            patch_size: g.max_res / 4,
            global_resize: 64,
            fm_levels: g.default_fm_levels(),
            crop_seed: 0,
        }
    }

    pub fn validate(&self, g: &GeneratorConfig) -> Result<()> {
        if self.patch_count == 0 {
            return Err(Error::Config("patch_count must be >= 1".into()));
        }
        if self.patch_size == 0 || self.patch_size >= g.max_res {
            return Err(Error::Config(format!(
                "patch_size {} must be in 1..{}",
                self.patch_size, g.max_res
            )));
        }
        let r_level = g.replacement_res.trailing_zeros();
        let max_level = g.max_res.trailing_zeros();
        if let Some(l) = self.fm_levels.iter().find(|&&l| l <= r_level || l > max_level) {
            return Err(Error::Config(format!(
                "feature-matching level {l} must lie in {}..={max_level}",
                r_level + 1
            )));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(dim_err(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// mean |gt − syn|
pub fn l1_loss(gt: &Tensor, syn: &Tensor) -> Result<Tensor> {
    same_shape(gt, syn)?;
    Ok((gt - syn)?.abs()?.mean_all()?)
}

pub fn global_perceptual(
    gt: &Tensor,
    syn: &Tensor,
    extractor: &PerceptualExtractor,
    global_resize: usize,
) -> Result<Tensor> {
    same_shape(gt, syn)?;
    let a = resize_bilinear(gt, global_resize, global_resize)?;
    let b = resize_bilinear(syn, global_resize, global_resize)?;
    extractor.distance(&a, &b)
}

/// `k` top-left corners for square patches that fit inside `h`×`w`.
pub fn crop_offsets(k: usize, patch: usize, h: usize, w: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if patch > h || patch > w || patch == 0 {
        return Err(dim_err(format!("patch {patch} does not fit a {h}×{w} image")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k)
        .map(|_| (rng.random_range(0..=h - patch), rng.random_range(0..=w - patch)))
        .collect())
}

/// Mean perceptual distance over `k` patches cropped at the same seeded
/// offsets from both images.
pub fn local_perceptual(
    gt: &Tensor,
    syn: &Tensor,
    extractor: &PerceptualExtractor,
    k: usize,
    patch: usize,
    crop_seed: u64,
) -> Result<Tensor> {
    same_shape(gt, syn)?;
    let (_, _, h, w) = gt.dims4()?;
    let offsets = crop_offsets(k, patch, h, w, crop_seed)?;
    let crop = |t: &Tensor, y: usize, x: usize| -> candle_core::Result<Tensor> {
        t.narrow(2, y, patch)?.narrow(3, x, patch)
    };
    let mut total: Option<Tensor> = None;
    for &(y, x) in &offsets {
        let d = extractor.distance(&crop(gt, y, x)?, &crop(syn, y, x)?)?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    Ok((total.expect("k >= 1") / k as f64)?)
}

/// (1/N) Σ_l mean |G^l(gt) − G^l(syn)|
pub fn feature_matching(gt: &BlockTrace, syn: &BlockTrace, levels: &[u32]) -> Result<Tensor> {
    if levels.is_empty() {
        return Err(Error::Config("feature matching needs at least one level".into()));
    }
    let mut total: Option<Tensor> = None;
    for &l in levels {
        let a = gt
            .level(l)
            .ok_or_else(|| dim_err(format!("ground-truth trace lacks level {l}")))?;
        let b = syn
            .level(l)
            .ok_or_else(|| dim_err(format!("synthesized trace lacks level {l}")))?;
        let d = l1_loss(a, b)?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    Ok((total.unwrap() / levels.len() as f64)?)
}

/// Per-term values; `None` for terms whose weight is zero (not computed).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: Option<f64>,
    pub global: Option<f64>,
    pub local: Option<f64>,
    pub fm: Option<f64>,
}

pub struct ObjectiveInputs<'a> {
    pub gt: &'a Tensor,
    pub syn: &'a Tensor,
    pub gt_trace: Option<&'a BlockTrace>,
    pub syn_trace: Option<&'a BlockTrace>,
}

/// λ_l1·L1 + λ_gp·global + λ_lp·local + λ_fm·FM, summed in that order over
/// the terms with nonzero weight.
pub fn total_objective(
    inputs: &ObjectiveInputs<'_>,
    weights: &LossWeights,
    cfg: &LossConfig,
    extractor: &PerceptualExtractor,
) -> Result<(Tensor, LossBreakdown)> {
    weights.validate()?;
    let mut parts: Vec<Tensor> = Vec::with_capacity(4);
    let mut br = LossBreakdown::default();
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
    if weights.lambda_l1 > 0.0 {
        let t = l1_loss(inputs.gt, inputs.syn)?;
        br.l1 = Some(scalar(&t)?);
        parts.push((t * weights.lambda_l1)?);
    }
    if weights.lambda_gp > 0.0 {
        let t = global_perceptual(inputs.gt, inputs.syn, extractor, cfg.global_resize)?;
        br.global = Some(scalar(&t)?);
        parts.push((t * weights.lambda_gp)?);
    }
    if weights.lambda_lp > 0.0 {
        let t = local_perceptual(inputs.gt, inputs.syn, extractor, cfg.patch_count, cfg.patch_size, cfg.crop_seed)?;
        br.local = Some(scalar(&t)?);
        parts.push((t * weights.lambda_lp)?);
    }
    if weights.lambda_fm > 0.0 {
        let (g, s) = match (inputs.gt_trace, inputs.syn_trace) {
            (Some(g), Some(s)) => (g, s),
            _ => return Err(Error::Config("feature matching requires both traces".into())),
        };
        let t = feature_matching(g, s, &cfg.fm_levels)?;
        br.fm = Some(scalar(&t)?);
        parts.push((t * weights.lambda_fm)?);
    }
    let mut it = parts.into_iter();
    let mut total = it.next().expect("validated weights");
    for p in it {
        total = (total + p)?;
    }
    br.total = scalar(&total)?;
    Ok((total, br))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn rand(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn s(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn l1_constant_offset() {
        let a = rand((1, 3, 8, 8), 1);
        let b = (&a + 0.5).unwrap();
        assert!((s(&l1_loss(&a, &b).unwrap()) - 0.5).abs() < 1e-12);
        assert_eq!(s(&l1_loss(&a, &a).unwrap()), 0.0);
    }

    #[test]
    fn perceptual_zero_at_identity_and_symmetric() {
        let ex = PerceptualExtractor::new(1, &Device::Cpu).unwrap();
        let a = rand((2, 3, 16, 16), 2);
        let b = rand((2, 3, 16, 16), 3);
        assert_eq!(s(&global_perceptual(&a, &a, &ex, 8).unwrap()), 0.0);
        let ab = s(&global_perceptual(&a, &b, &ex, 8).unwrap());
        let ba = s(&global_perceptual(&b, &a, &ex, 8).unwrap());
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-12);
        assert_eq!(s(&local_perceptual(&a, &a, &ex, 5, 4, 9).unwrap()), 0.0);
    }

    #[test]
    fn crops_are_seeded_and_in_bounds() {
        let a = crop_offsets(20, 16, 64, 64, 1).unwrap();
        assert_eq!(a, crop_offsets(20, 16, 64, 64, 1).unwrap());
        assert_ne!(a, crop_offsets(20, 16, 64, 64, 2).unwrap());
        assert!(a.iter().all(|&(y, x)| y <= 48 && x <= 48));
        assert!(crop_offsets(1, 65, 64, 64, 0).is_err());
    }

    #[test]
    fn full_scale_fm_levels() {
        let c = LossConfig::for_generator(&GeneratorConfig::full_scale());
        assert_eq!(c.fm_levels, vec![6, 7, 8, 9]);
        assert_eq!(c.patch_count, 20);
        c.validate(&GeneratorConfig::full_scale()).unwrap();
        let bad = LossConfig {
            fm_levels: vec![5],
            ..c
        };
        assert!(bad.validate(&GeneratorConfig::full_scale()).is_err());
    }

    #[test]
    fn weights_must_have_a_positive_entry() {
        let z = LossWeights {
            lambda_l1: 0.0,
            lambda_gp: 0.0,
            lambda_lp: 0.0,
            lambda_fm: 0.0,
        };
        assert!(z.validate().is_err());
        LossWeights::only_l1().validate().unwrap();
    }
}
