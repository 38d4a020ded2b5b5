//! The composed conditional model: encoder output injected into the frozen
//! generator at the replacement resolution.

use candle_core::{Device, Tensor, Var};
use rand::Rng;

use super::config::{EncoderConfig, GeneratorConfig};
use super::encoder::SpatialEncoder;
use super::generator::Generator;
use super::types::{BlockTrace, ConditionBatch, ConditionPair, StyleCode};
use crate::error::{dim_err, Error, Result};
use crate::nn::layers::{Parameterized, Tracking};

#[derive(Debug, Clone)]
pub struct ScModel {
    pub generator: Generator,
    pub encoder: SpatialEncoder,
}

/// Named parameters split by whether training may update them.
#[derive(Debug, Clone)]
pub struct Partition {
    pub trainable: Vec<(String, Var)>,
    pub frozen: Vec<(String, Var)>,
}

impl Partition {
    pub fn trainable_count(&self) -> usize {
        self.trainable.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.trainable.iter().map(|(_, v)| v.clone()).collect()
    }

    /// Copies of every frozen tensor, for bitwise comparison after training.
    pub fn snapshot_frozen(&self) -> Result<Vec<(String, Vec<f32>)>> {
        self.frozen
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().flatten_all()?.to_vec1::<f32>()?)))
            .collect()
    }

    /// Fails with the first frozen tensor whose bits differ from `snapshot`.
    pub fn verify_frozen(&self, snapshot: &[(String, Vec<f32>)]) -> Result<()> {
        for ((name, v), (sname, sv)) in self.frozen.iter().zip(snapshot) {
            let now = v.as_tensor().flatten_all()?.to_vec1::<f32>()?;
            let same = name == sname
                && now.len() == sv.len()
                && now.iter().zip(sv).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(Error::State(format!("frozen parameter {name} was modified")));
            }
        }
        Ok(())
    }
}

impl ScModel {
    pub fn new<R: Rng>(generator: Generator, encoder_config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let encoder = SpatialEncoder::new(encoder_config, generator.config(), rng, generator.device())?;
        Ok(Self { generator, encoder })
    }

    pub fn generator_config(&self) -> &GeneratorConfig {
        self.generator.config()
    }

    pub fn device(&self) -> &Device {
        self.generator.device()
    }

    /// Encoder parameters train; every generator parameter stays fixed. The
    /// pre-replacement generator layers are frozen too, since the same
    /// network synthesizes the training targets.
    pub fn freeze_post_replacement(&self) -> Partition {
        let (pre, post) = self.generator.params_split();
        let mut frozen = post;
        frozen.extend(pre);
        Partition {
            trainable: self.encoder.named_params("encoder"),
            frozen,
        }
    }

    /// `low_styles`: (B, L_low, D). Returns the image and, when traced, the
    /// post-replacement block outputs.
    pub fn synthesize_batch(
        &self,
        cond: &ConditionBatch,
        low_styles: &Tensor,
        encoder_tracking: Tracking,
        traced: bool,
    ) -> Result<(Tensor, Option<BlockTrace>)> {
        let (_, l, _) = low_styles.dims3()?;
        let want = self.generator_config().low_style_count();
        if l != want {
            return Err(dim_err(format!("{l} low-style rows, expected {want}")));
        }
        let pair = self.encoder.encode_batch(cond, encoder_tracking)?;
        let mut trace = traced.then(BlockTrace::default);
        let img = self
            .generator
            .synthesize_suffix(&pair, low_styles, Tracking::Frozen, trace.as_mut())?;
        if let Some(t) = trace.as_mut() {
            t.pair = Some(pair);
        }
        Ok((img, trace))
    }

    /// Single-condition convenience with explicit low-style rows.
    pub fn synthesize_conditional(&self, cond: &ConditionPair, low: &StyleCode) -> Result<Tensor> {
        let low = if low.rows() == self.generator_config().total_styles() {
            StyleCode::stack_low(&[low], self.device())?
        } else {
            let d = low.dim();
            Tensor::from_vec(low.values().to_vec(), (1, low.rows(), d), self.device())?
        };
        let classes = self.encoder.config().label_classes;
        let batch = ConditionBatch::from_pairs(&[cond], classes, self.device())?;
        Ok(self.synthesize_batch(&batch, &low, Tracking::Frozen, false)?.0.clamp(-1f32, 1f32)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> ScModel {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Generator::new(&GeneratorConfig::desk(), &mut rng, &Device::Cpu).unwrap();
        ScModel::new(g, &EncoderConfig::desk(), &mut rng).unwrap()
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let m = model();
        let p = m.freeze_post_replacement();
        assert!(p.trainable_count() > 0 && p.frozen_count() > 0);
        let total = m.generator.param_count() + m.encoder.param_count();
        assert_eq!(p.trainable_count() + p.frozen_count(), total);
        let mut names: Vec<_> = p.trainable.iter().chain(&p.frozen).map(|(n, _)| n.clone()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn low_styles_change_appearance() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = m.generator.sample_styles(&mut rng, 2).unwrap();
        let c = ConditionPair::blank(64);
        let a = m.synthesize_conditional(&c, &s[0]).unwrap();
        let b = m.synthesize_conditional(&c, &s[1]).unwrap();
        assert_eq!(a.dims4().unwrap(), (1, 3, 64, 64));
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn wrong_low_count_is_a_dimension_error() {
        let m = model();
        let c = ConditionPair::blank(64);
        let bad = StyleCode::zeros(3, 64, 0);
        assert!(matches!(m.synthesize_conditional(&c, &bad), Err(Error::Dimension(_))));
    }
}
