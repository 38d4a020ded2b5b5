//! Dynamic style-mixing training of the spatial encoder.

use std::path::{Path, PathBuf};

use candle_core::Var;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::data::TrainingSample;
use crate::error::{Error, Result};
use crate::losses::{total_objective, LossBreakdown, LossConfig, LossWeights, ObjectiveInputs, PerceptualExtractor};
use crate::model::{ConditionBatch, ConditionPair, Partition, ScModel, StyleCode};
use crate::nn::layers::Tracking;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub losses: LossBreakdown,
    /// Pool index of the low code drawn for each sample.
    pub low_indices: Vec<usize>,
}

/// Recorded style codes that low rows are drawn from.
#[derive(Debug, Clone)]
pub struct StylePool {
    codes: Vec<StyleCode>,
}

impl StylePool {
    pub fn new(codes: Vec<StyleCode>) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::Data("empty style pool".into()));
        }
        Ok(Self { codes })
    }

    pub fn from_samples(samples: &[&TrainingSample]) -> Result<Self> {
        Self::new(samples.iter().map(|s| s.require_style().cloned()).collect::<Result<_>>()?)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn get(&self, i: usize) -> &StyleCode {
        &self.codes[i]
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.codes.len())
    }
}

/// Everything a step needs besides the model and the batch.
pub struct StepContext<'a> {
    pub pool: &'a StylePool,
    pub weights: &'a LossWeights,
    pub loss: &'a LossConfig,
    pub extractor: &'a PerceptualExtractor,
}

/// The spec'd conditions of a batch, built once.
pub fn condition_batch(model: &ScModel, samples: &[&TrainingSample]) -> Result<ConditionBatch> {
    let conds: Vec<ConditionPair> = samples.iter().map(|s| s.condition()).collect::<Result<_>>()?;
    let refs: Vec<&ConditionPair> = conds.iter().collect();
    ConditionBatch::from_pairs(&refs, model.encoder.config().label_classes, model.device())
}

/// One update: each sample's high rows are combined with a low code drawn
/// from the pool, the frozen generator renders the target from that mix,
/// and the encoder path renders the same low code from the sample's
/// conditions. Only `partition.trainable` receives the update; a gradient
/// on any frozen tensor is a state error.
pub fn train_step<R: Rng>(
    model: &ScModel,
    partition: &Partition,
    opt: &mut AdamW,
    batch: &[&TrainingSample],
    ctx: &StepContext<'_>,
    rng: &mut R,
    step: usize,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let g = model.generator_config();
    let split = g.high_style_count();
    let dev = model.device();
    let low_indices: Vec<usize> = batch.iter().map(|_| ctx.pool.draw(rng)).collect();
    let mut mixed = Vec::with_capacity(batch.len());
    for (s, &j) in batch.iter().zip(&low_indices) {
        let own = s.require_style()?.clone().with_split(split)?;
        let low = ctx.pool.get(j).clone().with_split(split)?;
        mixed.push(own.mixed_with(&low)?);
    }
    let mixed_refs: Vec<&StyleCode> = mixed.iter().collect();
    let styles = StyleCode::stack(&mixed_refs, dev)?;
    let need_trace = ctx.weights.lambda_fm > 0.0;
    let (gt, gt_trace) = model.generator.synthesize(&styles, Tracking::Frozen, need_trace)?;
    let low = styles.narrow(1, split, g.low_style_count())?;
    let cond = condition_batch(model, batch)?;
    let (syn, syn_trace) = model.synthesize_batch(&cond, &low, Tracking::Trainable, need_trace)?;
    let loss_cfg = LossConfig {
        crop_seed: rng.random(),
        ..ctx.loss.clone()
    };
    let inputs = ObjectiveInputs {
        gt: &gt.detach(),
        syn: &syn,
        gt_trace: gt_trace.as_ref(),
        syn_trace: syn_trace.as_ref(),
    };
    let (total, losses) = total_objective(&inputs, ctx.weights, &loss_cfg, ctx.extractor)?;
    if !losses.total.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("objective is {}", losses.total),
        });
    }
    let grads = total.backward()?;
    if let Some((name, _)) = partition.frozen.iter().find(|(_, v)| grads.get(v.as_tensor()).is_some()) {
        return Err(Error::State(format!("gradient reached frozen parameter {name}")));
    }
    opt.step(&grads)?;
    Ok(StepReport {
        step,
        losses,
        low_indices,
    })
}

pub fn adam_for(vars: Vec<Var>, cfg: &TrainConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: 0.0,
        },
    )?)
}

/// Owns the optimizer, sampling state and checkpoint schedule of one run.
pub struct Trainer {
    pub model: ScModel,
    pub config: TrainConfig,
    partition: Partition,
    opt: AdamW,
    pool: StylePool,
    train: Vec<TrainingSample>,
    loss: LossConfig,
    extractor: PerceptualExtractor,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl Trainer {
    /// `train`: samples with paired styles; the pool is their styles.
    pub fn new(model: ScModel, config: TrainConfig, train: Vec<TrainingSample>, extractor: PerceptualExtractor) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        let refs: Vec<&TrainingSample> = train.iter().collect();
        let pool = StylePool::from_samples(&refs)?;
        let partition = model.freeze_post_replacement();
        let opt = adam_for(partition.trainable_vars(), &config)?;
        let loss = config.loss_config(model.generator_config())?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let order = (0..train.len()).collect();
        Ok(Self {
            cursor: train.len(),
            model,
            partition,
            opt,
            pool,
            train,
            loss,
            extractor,
            rng,
            order,
            config,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.config.batch_size);
        while idx.len() < self.config.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            idx.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        idx
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let idx = self.next_batch();
        let batch: Vec<&TrainingSample> = idx.iter().map(|&i| &self.train[i]).collect();
        let ctx = StepContext {
            pool: &self.pool,
            weights: &self.config.weights,
            loss: &self.loss,
            extractor: &self.extractor,
        };
        let r = train_step(&self.model, &self.partition, &mut self.opt, &batch, &ctx, &mut self.rng, self.step)?;
        self.step += 1;
        if let (Some(dir), k) = (&self.config.out_dir, self.config.checkpoint_interval) {
            if k > 0 && self.step.is_multiple_of(k) {
                self.save_checkpoint(dir)?;
            }
        }
        Ok(r)
    }

    /// Steps until `steps` total have run or `on_step` returns false.
    pub fn run(&mut self, steps: usize, mut on_step: impl FnMut(&StepReport, &ScModel) -> Result<bool>) -> Result<()> {
        while self.step < steps {
            let r = self.step()?;
            if !on_step(&r, &self.model)? {
                break;
            }
        }
        Ok(())
    }

    /// Writes `step_<n>.ckpt` and `latest.ckpt` under `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("step_{:06}.ckpt", self.step));
        let meta = serde_json::json!({ "step": self.step, "train": self.config });
        self.model.save(&path, meta.clone())?;
        self.model.save(&dir.join("latest.ckpt"), meta)?;
        Ok(path)
    }
}

/// A fresh conditional model over `generator` laid out for `cfg`; the
/// encoder initialization depends only on `cfg.seed`.
pub fn model_for(generator: &crate::model::Generator, cfg: &TrainConfig) -> Result<ScModel> {
    let gcfg = cfg.generator_config(generator.config())?;
    let g = generator.with_replacement(gcfg.replacement_res)?;
    let ecfg = cfg.encoder_config(&gcfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00e4_c0de);
    ScModel::new(g, &ecfg, &mut rng)
}
