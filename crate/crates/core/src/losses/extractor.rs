use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::nn::layers::{Conv2d, Parameterized, Tracking};
use crate::nn::ops::leaky_relu;

pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed_1ea7;

/// Fixed random convolutional pyramid used as a perceptual feature space.
/// Weights are drawn from a seed and never updated.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    layers: Vec<Conv2d>,
    layer_weights: Vec<f64>,
    seed: u64,
}

const WIDTHS: [usize; 3] = [16, 32, 32];

impl PerceptualExtractor {
    pub fn new(seed: u64, dev: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut c = 3;
        for &w in &WIDTHS {
            layers.push(Conv2d::new(&mut rng, c, w, 3, 2, true, dev)?);
            c = w;
        }
        Ok(Self {
            layer_weights: vec![1.0; layers.len()],
            layers,
            seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer_weights(&self) -> &[f64] {
        &self.layer_weights
    }

    /// Total width of the pooled descriptor.
    pub fn pooled_dim(&self) -> usize {
        WIDTHS.iter().sum()
    }

    /// Raw activations of every layer for a (B, 3, H, W) batch.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, _, _) = x.dims4()?;
        if c != 3 {
            return Err(dim_err(format!("extractor expects 3 channels, got {c}")));
        }
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            h = leaky_relu(&l.forward(&h, Tracking::Frozen)?, 0.2, 1.0)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Unit-length features along the channel axis.
    pub fn normalize(f: &Tensor) -> Result<Tensor> {
        let n = (f.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
        Ok(f.broadcast_div(&n)?)
    }

    /// Σ_l w_l · mean_{b,y,x} Σ_c (f̂_l(a) − f̂_l(b))²; a scalar tensor.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(dim_err(format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total: Option<Tensor> = None;
        for ((x, y), &w) in fa.iter().zip(&fb).zip(&self.layer_weights) {
            let d = (Self::normalize(x)? - Self::normalize(y)?)?
                .sqr()?
                .sum(1)?
                .mean_all()?;
            let d = (d * w)?;
            total = Some(match total {
                Some(t) => (t + d)?,
                None => d,
            });
        }
        Ok(total.expect("extractor has layers"))
    }

    /// Spatially averaged activations of every layer, concatenated: (B, pooled_dim).
    pub fn pooled(&self, x: &Tensor) -> Result<Tensor> {
        let feats = self.features(x)?;
        let pooled = feats
            .iter()
            .map(|f| f.mean(3)?.mean(2))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::cat(&pooled, 1)?.to_dtype(DType::F32)?)
    }

    pub fn param_count(&self) -> usize {
        self.layers.param_count()
    }
}

impl Parameterized for PerceptualExtractor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        self.layers.visit(&crate::nn::layers::join(prefix, "layers"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_features() {
        let dev = Device::Cpu;
        let a = PerceptualExtractor::new(3, &dev).unwrap();
        let b = PerceptualExtractor::new(3, &dev).unwrap();
        let x = Tensor::randn(0f32, 1., (2, 3, 16, 16), &dev).unwrap();
        let fa = a.pooled(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let fb = b.pooled(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(fa, fb);
        assert_eq!(fa.len(), 2 * a.pooled_dim());
    }
}
