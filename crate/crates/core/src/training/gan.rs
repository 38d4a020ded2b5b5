//! Unconditional adversarial pretraining of the synthesis network.

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ColorImage;
use crate::error::{Error, Result};
use crate::losses::PerceptualExtractor;
use crate::metrics::desk_fid;
use crate::model::{Generator, GeneratorConfig};
use crate::nn::layers::{join, Conv2d, Linear, Parameterized, Tracking};
use crate::nn::ops::{leaky_relu, softplus};

const GAIN: f64 = std::f64::consts::SQRT_2;

/// Residual-free convolutional critic halving resolution down to 4².
#[derive(Debug, Clone)]
pub struct Discriminator {
    from_rgb: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    fc: Linear,
    out: Linear,
    base_channels: usize,
}

impl Discriminator {
    pub fn new<R: Rng>(res: usize, rng: &mut R, dev: &Device) -> Result<Self> {
        if !res.is_power_of_two() || res < 8 {
            return Err(Error::Config(format!("discriminator resolution {res} must be a power of two >= 8")));
        }
        let width = |r: usize| -> usize { (1024 / r).clamp(16, 64) };
        let from_rgb = Conv2d::new(rng, 3, width(res), 1, 1, true, dev)?;
        let mut blocks = Vec::new();
        let mut r = res;
        while r > 4 {
            let (ci, co) = (width(r), width(r / 2));
            blocks.push((
                Conv2d::new(rng, ci, ci, 3, 1, true, dev)?,
                Conv2d::new(rng, ci, co, 3, 2, true, dev)?,
            ));
            r /= 2;
        }
        let c4 = width(4);
        Ok(Self {
            from_rgb,
            blocks,
            fc: Linear::new(rng, c4 * 16, c4, 0.0, 1.0, dev)?,
            out: Linear::new(rng, c4, 1, 0.0, 1.0, dev)?,
            base_channels: c4,
        })
    }

    /// (B, 3, H, W) → (B, 1) logits.
    pub fn forward(&self, x: &Tensor, t: Tracking) -> Result<Tensor> {
        let a = |v: Tensor| leaky_relu(&v, 0.2, GAIN);
        let mut h = a(self.from_rgb.forward(x, t)?)?;
        for (c1, c2) in &self.blocks {
            h = a(c1.forward(&h, t)?)?;
            h = a(c2.forward(&h, t)?)?;
        }
        let b = h.dim(0)?;
        let h = h.reshape((b, self.base_channels * 16))?;
        let h = a(self.fc.forward(&h, t)?)?;
        Ok(self.out.forward(&h, t)?)
    }
}

impl Parameterized for Discriminator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        self.from_rgb.visit(&join(prefix, "from_rgb"), f);
        for (i, (a, b)) in self.blocks.iter().enumerate() {
            a.visit(&join(prefix, &format!("blocks.{i}.0")), f);
            b.visit(&join(prefix, &format!("blocks.{i}.1")), f);
        }
        self.fc.visit(&join(prefix, "fc"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// R1 weight on real images; 0 disables the penalty.
    pub r1_gamma: f64,
    /// Lazy regularization: the penalty runs every `r1_interval` steps,
    /// scaled by the interval.
    pub r1_interval: usize,
    /// Input step, in image units, of the finite difference used for R1.
    pub r1_fd_step: f64,
    /// Generator weight moving average; 0 keeps raw weights.
    pub ema_beta: f64,
    pub seed: u64,
    /// Samples per side of the gate's FID estimate.
    pub fid_samples: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            lr_g: 2e-3,
            lr_d: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            r1_gamma: 1.0,
            r1_interval: 4,
            r1_fd_step: 1e-2,
            ema_beta: 0.995,
            seed: 0,
            fid_samples: 256,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.r1_interval == 0 {
            return Err(Error::Config("steps, batch_size and r1_interval must be >= 1".into()));
        }
        if self.fid_samples < 2 {
            return Err(Error::Config("fid_samples must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(Error::Config("ema_beta must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanStepLosses {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub r1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// desk-FID of the random-init generator against the corpus.
    pub baseline_fid: f64,
    pub final_fid: f64,
    pub steps: usize,
    pub history: Vec<GanStepLosses>,
}

impl PretrainReport {
    /// Trained FID at least `factor` times below the baseline.
    pub fn passes(&self, factor: f64) -> bool {
        self.final_fid * factor <= self.baseline_fid
    }
}

fn adam(vars: Vec<Var>, lr: f64, cfg: &GanConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

fn vars_of(p: &impl Parameterized) -> Vec<Var> {
    p.named_params("").into_iter().map(|(_, v)| v).collect()
}

fn latents<R: Rng>(rng: &mut R, n: usize, d: usize, dev: &Device) -> Result<Tensor> {
    let v: Vec<f32> = (0..n * d)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            x as f32
        })
        .collect();
    Ok(Tensor::from_vec(v, (n, d), dev)?)
}

/// Images from latents; unclamped.
pub fn generate(g: &Generator, z: &Tensor, t: Tracking) -> Result<Tensor> {
    let w = g.map(z, t)?;
    Ok(g.synthesize(&g.broadcast_w(&w)?, t, false)?.0)
}

/// `n` clamped samples from seeded latents, chunked.
pub fn sample_images(g: &Generator, n: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = g.config().style_dim;
    let z = latents(&mut rng, n, d, g.device())?;
    let mut parts = Vec::new();
    for s in (0..n).step_by(32) {
        let len = 32.min(n - s);
        parts.push(generate(g, &z.narrow(0, s, len)?, Tracking::Frozen)?.clamp(-1f32, 1f32)?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// desk-FID of generator samples against a reference image set.
pub fn generator_fid(g: &Generator, reference: &Tensor, n: usize, seed: u64, ex: &PerceptualExtractor) -> Result<f64> {
    desk_fid(&sample_images(g, n, seed)?, reference, ex)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check(step: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("{what} is {v}"),
        })
    }
}

/// R1 surrogate whose parameter gradient approximates that of
/// γ/2·E‖∇ₓD(x)‖², using central differences of D along the input gradient.
fn r1_surrogate(d: &Discriminator, real: &Tensor, gamma: f64, h: f64) -> Result<(Tensor, f64)> {
    let x = Var::from_tensor(real)?;
    let out = d.forward(x.as_tensor(), Tracking::Frozen)?.sum_all()?;
    let grads = out.backward()?;
    let g = grads
        .get(x.as_tensor())
        .ok_or_else(|| Error::State("no input gradient for R1".into()))?
        .detach();
    let b = g.dim(0)?;
    let norms = g.sqr()?.flatten_from(1)?.sum(1)?.sqrt()?; // (B)
    let penalty = scalar(&norms.sqr()?.mean_all()?)? * gamma / 2.0;
    let eps = (norms.clamp(1e-12f32, f32::MAX)?.recip()? * h)?; // (B)
    let step = g.broadcast_mul(&eps.reshape((b, 1, 1, 1))?)?;
    let plus = d.forward(&(real + &step)?, Tracking::Trainable)?;
    let minus = d.forward(&(real - &step)?, Tracking::Trainable)?;
    let dd = (plus - minus)?.squeeze(1)?.broadcast_div(&(eps * 2.0)?)?;
    Ok(((dd.mean_all()? * gamma)?, penalty))
}

/// Generator weights plus a running average of them.
struct Ema {
    beta: f64,
    shadow: Vec<Tensor>,
}

impl Ema {
    fn new(g: &Generator, beta: f64) -> Result<Self> {
        let shadow = vars_of(g).iter().map(|v| v.as_tensor().copy()).collect::<candle_core::Result<_>>()?;
        Ok(Self { beta, shadow })
    }

    fn update(&mut self, g: &Generator) -> Result<()> {
        for (s, v) in self.shadow.iter_mut().zip(vars_of(g)) {
            *s = ((&*s * self.beta)? + (v.as_tensor() * (1.0 - self.beta))?)?;
        }
        Ok(())
    }

    fn apply(&self, g: &Generator) -> Result<()> {
        for (s, v) in self.shadow.iter().zip(vars_of(g)) {
            v.set(s)?;
        }
        Ok(())
    }
}

/// Trains `generator` in place against `corpus`; the report carries the
/// baseline FID of the weights it started from.
pub fn pretrain_generator(
    generator: &Generator,
    corpus: &[ColorImage],
    cfg: &GanConfig,
    extractor: &PerceptualExtractor,
    mut on_step: impl FnMut(&GanStepLosses),
) -> Result<PretrainReport> {
    cfg.validate()?;
    if corpus.len() < 2 {
        return Err(Error::Data("pretraining needs at least two corpus images".into()));
    }
    let dev = generator.device().clone();
    let gcfg: &GeneratorConfig = generator.config();
    let d_style = gcfg.style_dim;
    let refs: Vec<&ColorImage> = corpus.iter().take(cfg.fid_samples.max(2)).collect();
    let reference = ColorImage::batch_tensor(&refs, &dev)?;
    let fid_seed = cfg.seed ^ 0x5eed_f1d0;
    let baseline_fid = generator_fid(generator, &reference, cfg.fid_samples, fid_seed, extractor)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let disc = Discriminator::new(gcfg.max_res, &mut rng, &dev)?;
    let mut opt_g = adam(vars_of(generator), cfg.lr_g, cfg)?;
    let mut opt_d = adam(vars_of(&disc), cfg.lr_d, cfg)?;
    let mut ema = (cfg.ema_beta > 0.0).then(|| Ema::new(generator, cfg.ema_beta)).transpose()?;
    let mut history = Vec::with_capacity(cfg.steps);
    let bs = cfg.batch_size;
    for step in 0..cfg.steps {
        let idx: Vec<&ColorImage> = (0..bs).map(|_| &corpus[rng.random_range(0..corpus.len())]).collect();
        let real = ColorImage::batch_tensor(&idx, &dev)?;

        let z = latents(&mut rng, bs, d_style, &dev)?;
        let fake = generate(generator, &z, Tracking::Frozen)?;
        let d_loss = (softplus(&disc.forward(&fake, Tracking::Trainable)?)?.mean_all()?
            + softplus(&disc.forward(&real, Tracking::Trainable)?.neg()?)?.mean_all()?)?;
        let d_val = check(step, "discriminator loss", scalar(&d_loss)?)?;
        opt_d.backward_step(&d_loss)?;

        let mut r1 = None;
        if cfg.r1_gamma > 0.0 && step % cfg.r1_interval == 0 {
            let (sur, pen) = r1_surrogate(&disc, &real, cfg.r1_gamma * cfg.r1_interval as f64, cfg.r1_fd_step)?;
            check(step, "R1 penalty", pen)?;
            opt_d.backward_step(&sur)?;
            r1 = Some(pen / cfg.r1_interval as f64);
        }

        let z = latents(&mut rng, bs, d_style, &dev)?;
        let fake = generate(generator, &z, Tracking::Trainable)?;
        let g_loss = softplus(&disc.forward(&fake, Tracking::Frozen)?.neg()?)?.mean_all()?;
        let g_val = check(step, "generator loss", scalar(&g_loss)?)?;
        opt_g.backward_step(&g_loss)?;
        if let Some(e) = ema.as_mut() {
            e.update(generator)?;
        }

        let rec = GanStepLosses {
            step,
            d_loss: d_val,
            g_loss: g_val,
            r1,
        };
        on_step(&rec);
        history.push(rec);
    }
    if let Some(e) = &ema {
        e.apply(generator)?;
    }
    generator.check_finite().map_err(|e| Error::Divergence {
        step: cfg.steps,
        detail: e.to_string(),
    })?;
    let final_fid = generator_fid(generator, &reference, cfg.fid_samples, fid_seed, extractor)?;
    Ok(PretrainReport {
        baseline_fid,
        final_fid,
        steps: cfg.steps,
        history,
    })
}
