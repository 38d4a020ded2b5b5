//! Spatial encoder: sketch and label branches, a shared stride-2 trunk, and
//! two residual heads producing the feature map and image at the injection
//! resolution.

use candle_core::{Device, Tensor, Var};
use rand::Rng;

use super::config::{EncoderConfig, GeneratorConfig, Modality, NormKind};
use super::types::{ConditionBatch, ConditionPair, IntermediatePair};
use crate::error::{dim_err, Result};
use crate::nn::layers::{join, Conv2d, Parameterized, Tracking};
use crate::nn::ops::{instance_norm, leaky_relu};

const SLOPE: f64 = 0.2;

fn act(x: &Tensor) -> candle_core::Result<Tensor> {
    leaky_relu(x, SLOPE, 1.0)
}

fn norm(kind: NormKind, x: &Tensor) -> candle_core::Result<Tensor> {
    match kind {
        NormKind::Instance => instance_norm(x, 1e-5),
        NormKind::None => Ok(x.clone()),
    }
}

/// conv → norm → leaky ReLU
#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    norm: NormKind,
}

impl ConvBlock {
    fn new<R: Rng>(rng: &mut R, c_in: usize, c_out: usize, stride: usize, norm: NormKind, dev: &Device) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(rng, c_in, c_out, 3, stride, true, dev)?,
            norm,
        })
    }

    fn forward(&self, x: &Tensor, t: Tracking) -> Result<Tensor> {
        Ok(act(&norm(self.norm, &self.conv.forward(x, t)?)?)?)
    }
}

/// Two 3×3 convolutions with an identity skip; channel-preserving.
#[derive(Debug, Clone)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
    norm: NormKind,
}

impl ResBlock {
    fn new<R: Rng>(rng: &mut R, c: usize, norm: NormKind, dev: &Device) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(rng, c, c, 3, 1, true, dev)?,
            b: Conv2d::new(rng, c, c, 3, 1, true, dev)?,
            norm,
        })
    }

    fn forward(&self, x: &Tensor, t: Tracking) -> Result<Tensor> {
        let h = act(&norm(self.norm, &self.a.forward(x, t)?)?)?;
        let h = norm(self.norm, &self.b.forward(&h, t)?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
struct Head {
    blocks: Vec<ResBlock>,
    out: Conv2d,
}

impl Head {
    fn new<R: Rng>(rng: &mut R, c: usize, blocks: usize, c_out: usize, norm: NormKind, dev: &Device) -> Result<Self> {
        Ok(Self {
            blocks: (0..blocks)
                .map(|_| ResBlock::new(rng, c, norm, dev))
                .collect::<Result<_>>()?,
            out: Conv2d::new(rng, c, c_out, 3, 1, true, dev)?,
        })
    }

    fn forward(&self, x: &Tensor, t: Tracking) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h, t)?;
        }
        Ok(self.out.forward(&h, t)?)
    }
}

#[derive(Debug, Clone)]
pub struct SpatialEncoder {
    config: EncoderConfig,
    target_channels: usize,
    target_res: usize,
    rgb: usize,
    sketch_branch: Option<ConvBlock>,
    label_branch: Option<ConvBlock>,
    trunk: Vec<ConvBlock>,
    feature_head: Head,
    image_head: Head,
    device: Device,
}

impl SpatialEncoder {
    pub fn new<R: Rng>(config: &EncoderConfig, generator: &GeneratorConfig, rng: &mut R, dev: &Device) -> Result<Self> {
        generator.validate()?;
        config.validate(generator)?;
        let r = generator.replacement_res;
        let c_r = generator.channels(r);
        let nk = config.norm_kind;
        let pb = config.per_branch_channels();
        let sketch_branch = match config.modality {
            Modality::Both | Modality::Sketch => Some(ConvBlock::new(rng, 1, pb, 2, nk, dev)?),
            Modality::Mask => None,
        };
        let label_branch = match config.modality {
            Modality::Both | Modality::Mask => Some(ConvBlock::new(rng, config.label_classes, pb, 2, nk, dev)?),
            Modality::Sketch => None,
        };
        let merged = config.merged_channels();
        let steps = config.down_steps(r)?;
        let mut trunk = Vec::new();
        let mut c = merged;
        for i in 0..steps {
            let c_out = if i + 1 == steps { c_r } else { merged };
            trunk.push(ConvBlock::new(rng, c, c_out, 2, nk, dev)?);
            c = c_out;
        }
        if steps == 0 && c != c_r {
            // no trunk: project the merged width onto C_r at full branch resolution
            trunk.push(ConvBlock::new(rng, c, c_r, 1, nk, dev)?);
        }
        let feature_head = Head::new(rng, c_r, config.feature_head_blocks, c_r, nk, dev)?;
        let image_head = Head::new(rng, c_r, config.image_head_blocks, generator.rgb_channels, nk, dev)?;
        Ok(Self {
            config: config.clone(),
            target_channels: c_r,
            target_res: r,
            rgb: generator.rgb_channels,
            sketch_branch,
            label_branch,
            trunk,
            feature_head,
            image_head,
            device: dev.clone(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn encode_batch(&self, cond: &ConditionBatch, t: Tracking) -> Result<IntermediatePair> {
        let (b, _, h, w) = cond.sketch.dims4()?;
        let (bl, cl, hl, wl) = cond.labels.dims4()?;
        let res = self.config.condition_res;
        if h != res || w != res || hl != res || wl != res || bl != b {
            return Err(dim_err(format!("condition is {h}×{w}, encoder expects {res}×{res}")));
        }
        if cl != self.config.label_classes {
            return Err(dim_err(format!("{cl} label channels, expected {}", self.config.label_classes)));
        }
        let mut parts = Vec::with_capacity(2);
        if let Some(br) = &self.sketch_branch {
            parts.push(br.forward(&cond.sketch, t)?);
        }
        if let Some(br) = &self.label_branch {
            parts.push(br.forward(&cond.labels, t)?);
        }
        let mut x = if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Tensor::cat(&parts, 1)?
        };
        for blk in &self.trunk {
            x = blk.forward(&x, t)?;
        }
        let pair = IntermediatePair {
            feature: self.feature_head.forward(&x, t)?,
            image: self.image_head.forward(&x, t)?,
        };
        pair.check(self.target_channels, self.target_res, self.rgb)?;
        Ok(pair)
    }

    pub fn encode(&self, conds: &[&ConditionPair], t: Tracking) -> Result<IntermediatePair> {
        let batch = ConditionBatch::from_pairs(conds, self.config.label_classes, &self.device)?;
        self.encode_batch(&batch, t)
    }
}

impl Parameterized for ConvBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        self.conv.visit(&join(prefix, "conv"), f);
    }
}

impl Parameterized for ResBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        self.a.visit(&join(prefix, "a"), f);
        self.b.visit(&join(prefix, "b"), f);
    }
}

impl Parameterized for Head {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        self.blocks.visit(&join(prefix, "blocks"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
}

impl Parameterized for SpatialEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        if let Some(b) = &self.sketch_branch {
            b.visit(&join(prefix, "sketch_branch"), f);
        }
        if let Some(b) = &self.label_branch {
            b.visit(&join(prefix, "label_branch"), f);
        }
        self.trunk.visit(&join(prefix, "trunk"), f);
        self.feature_head.visit(&join(prefix, "feature_head"), f);
        self.image_head.visit(&join(prefix, "image_head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn enc(modality: Modality) -> SpatialEncoder {
        let cfg = EncoderConfig {
            modality,
            ..EncoderConfig::desk()
        };
        SpatialEncoder::new(&cfg, &GeneratorConfig::desk(), &mut ChaCha8Rng::seed_from_u64(0), &Device::Cpu).unwrap()
    }

    #[test]
    fn output_shapes_match_injection_point() {
        let e = enc(Modality::Both);
        let c = ConditionPair::blank(64);
        let p = e.encode(&[&c], Tracking::Frozen).unwrap();
        assert_eq!(p.feature.dims4().unwrap(), (1, 32, 8, 8));
        assert_eq!(p.image.dims4().unwrap(), (1, 3, 8, 8));
        let v = p.feature.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn sketches_change_features() {
        let e = enc(Modality::Both);
        let a = ConditionPair::blank(64);
        let mut b = ConditionPair::blank(64);
        for i in 0..64 {
            b.sketch[20 * 64 + i] = 1.0;
        }
        let pa = e.encode(&[&a], Tracking::Frozen).unwrap();
        let pb = e.encode(&[&b], Tracking::Frozen).unwrap();
        let d = (pa.feature - pb.feature).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f32>().unwrap() > 0.0);
    }

    #[test]
    fn single_modality_keeps_merged_width() {
        let both = enc(Modality::Both);
        let sk = enc(Modality::Sketch);
        let mk = enc(Modality::Mask);
        assert!(sk.label_branch.is_none() && mk.sketch_branch.is_none());
        assert_eq!(sk.sketch_branch.as_ref().unwrap().conv.out_channels(), 32);
        assert_eq!(both.sketch_branch.as_ref().unwrap().conv.out_channels(), 16);
        let c = ConditionPair::blank(64);
        assert_eq!(mk.encode(&[&c], Tracking::Frozen).unwrap().feature.dims4().unwrap(), (1, 32, 8, 8));
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let e = enc(Modality::Both);
        let c = ConditionPair::blank(32);
        assert!(e.encode(&[&c], Tracking::Frozen).is_err());
    }
}
