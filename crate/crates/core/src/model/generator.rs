//! Style-based generator with a skip (ToRGB) output path.

use candle_core::{Device, Tensor, Var};
use rand::Rng;

use super::config::{GeneratorConfig, BASE_RES};
use super::types::{BlockTrace, IntermediatePair, StyleCode};
use crate::error::{dim_err, Error, Result};
use crate::nn::layers::{join, randn_var, Linear, ModulatedConv, Parameterized, Tracking};
use crate::nn::ops::{leaky_relu, upsample2x_bilinear};

pub type NamedVars = Vec<(String, Var)>;

#[derive(Debug, Clone)]
struct Level {
    res: usize,
    convs: Vec<ModulatedConv>,
    to_rgb: ModulatedConv,
    /// Style row per conv.
    conv_rows: Vec<usize>,
    rgb_row: usize,
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    mapping: Vec<Linear>,
    constant: Var,
    levels: Vec<Level>,
    device: Device,
}

impl Generator {
    pub fn new<R: Rng>(config: &GeneratorConfig, rng: &mut R, dev: &Device) -> Result<Self> {
        config.validate()?;
        let d = config.style_dim;
        let mapping = (0..config.mapping_layers)
            .map(|_| Linear::new(rng, d, d, 0.0, 0.01, dev))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let c4 = config.channels(BASE_RES);
        let constant = randn_var(rng, &[1, c4, BASE_RES, BASE_RES], 1.0, dev)?;
        let mut levels = Vec::new();
        let mut row = 0usize;
        let mut c_prev = c4;
        for res in config.resolutions() {
            let c = config.channels(res);
            let mut convs = Vec::new();
            let mut conv_rows = Vec::new();
            for i in 0..config.convs_at(res) {
                let c_in = if i == 0 { c_prev } else { c };
                let up = i == 0 && res > BASE_RES;
                convs.push(ModulatedConv::new(rng, c_in, c, 3, d, up, true, true, dev)?);
                conv_rows.push(row);
                row += 1;
            }
            let rgb_in = if convs.is_empty() { c_prev } else { c };
            let to_rgb =
                ModulatedConv::new(rng, rgb_in, config.rgb_channels, 1, d, false, false, false, dev)?;
            levels.push(Level {
                res,
                convs,
                to_rgb,
                conv_rows,
                rgb_row: row,
            });
            c_prev = c;
        }
        debug_assert_eq!(row + 1, config.total_styles());
        Ok(Self {
            config: config.clone(),
            mapping,
            constant,
            levels,
            device: dev.clone(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Same weights, different injection point.
    pub fn with_replacement(&self, res: usize) -> Result<Self> {
        let config = self.config.with_replacement(res);
        config.validate()?;
        Ok(Self {
            config,
            ..self.clone()
        })
    }

    /// Latents (B, D) → intermediate latents w (B, D).
    pub fn map(&self, z: &Tensor, t: Tracking) -> Result<Tensor> {
        let mut x = z.broadcast_div(&(z.sqr()?.mean_keepdim(1)? + 1e-8)?.sqrt()?)?;
        for layer in &self.mapping {
            x = leaky_relu(&layer.forward(&x, t)?, 0.2, std::f64::consts::SQRT_2)?;
        }
        Ok(x)
    }

    /// w (B, D) repeated into a (B, L, D) style tensor.
    pub fn broadcast_w(&self, w: &Tensor) -> Result<Tensor> {
        let (b, d) = w.dims2()?;
        Ok(w.unsqueeze(1)?
            .broadcast_as((b, self.config.total_styles(), d))?
            .contiguous()?)
    }

    fn style_row(styles: &Tensor, row: usize) -> Result<Tensor> {
        Ok(styles.narrow(1, row, 1)?.squeeze(1)?)
    }

    fn check_styles(&self, styles: &Tensor, rows: usize) -> Result<usize> {
        let (b, l, d) = styles.dims3()?;
        if l != rows || d != self.config.style_dim {
            return Err(dim_err(format!(
                "style tensor is {l}×{d}, expected {rows}×{}",
                self.config.style_dim
            )));
        }
        Ok(b)
    }

    pub fn check_finite(&self) -> Result<()> {
        let mut bad = None;
        self.visit("", &mut |name, v| {
            if bad.is_none() {
                let finite = v
                    .as_tensor()
                    .flatten_all()
                    .and_then(|t| t.to_vec1::<f32>())
                    .map(|d| d.iter().all(|x| x.is_finite()))
                    .unwrap_or(false);
                if !finite {
                    bad = Some(name);
                }
            }
        });
        match bad {
            Some(name) => Err(Error::Corruption(format!("parameter {name} is not finite"))),
            None => Ok(()),
        }
    }

    /// Runs levels 4..=r and returns the state handed to the next level.
    pub fn synthesize_prefix(
        &self,
        styles: &Tensor,
        t: Tracking,
        trace: Option<&mut BlockTrace>,
    ) -> Result<IntermediatePair> {
        let b = self.check_styles(styles, self.config.total_styles())?;
        let r = self.config.replacement_res;
        let mut x = t
            .bind(&self.constant)
            .broadcast_as((b, self.config.channels(BASE_RES), BASE_RES, BASE_RES))?
            .contiguous()?;
        let mut img: Option<Tensor> = None;
        let mut trace = trace;
        for level in self.levels.iter().take_while(|l| l.res <= r) {
            let (nx, nimg) = self.run_level(level, &x, img.as_ref(), styles, 0, t)?;
            x = nx;
            img = Some(nimg);
            if let Some(tr) = trace.as_deref_mut() {
                tr.features.push((level.res.trailing_zeros(), x.clone()));
            }
        }
        Ok(IntermediatePair {
            feature: x,
            image: img.expect("at least one level"),
        })
    }

    fn run_level(
        &self,
        level: &Level,
        x: &Tensor,
        img: Option<&Tensor>,
        styles: &Tensor,
        row_offset: usize,
        t: Tracking,
    ) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for (conv, &row) in level.convs.iter().zip(&level.conv_rows) {
            let s = Self::style_row(styles, row - row_offset)?;
            h = conv.forward(&h, &s, t)?;
        }
        let s = Self::style_row(styles, level.rgb_row - row_offset)?;
        let rgb = level.to_rgb.forward(&h, &s, t)?;
        let img = match img {
            Some(prev) => (upsample2x_bilinear(prev)? + rgb)?,
            None => rgb,
        };
        Ok((h, img))
    }

    /// Runs the levels after the replacement resolution from a given pair.
    /// `low_styles`: (B, L_low, D).
    pub fn synthesize_suffix(
        &self,
        pair: &IntermediatePair,
        low_styles: &Tensor,
        t: Tracking,
        trace: Option<&mut BlockTrace>,
    ) -> Result<Tensor> {
        let r = self.config.replacement_res;
        let b = pair.check(self.config.channels(r), r, self.config.rgb_channels)?;
        let bs = self.check_styles(low_styles, self.config.low_style_count())?;
        if bs != b {
            return Err(dim_err(format!("pair batch {b} vs style batch {bs}")));
        }
        let offset = self.config.high_style_count();
        let mut x = pair.feature.clone();
        let mut img = pair.image.clone();
        let mut trace = trace;
        for level in self.levels.iter().filter(|l| l.res > r) {
            let (nx, nimg) = self.run_level(level, &x, Some(&img), low_styles, offset, t)?;
            x = nx;
            img = nimg;
            if let Some(tr) = trace.as_deref_mut() {
                tr.features.push((level.res.trailing_zeros(), x.clone()));
            }
        }
        Ok(img)
    }

    /// Full synthesis from a (B, L, D) style tensor.
    pub fn synthesize(&self, styles: &Tensor, t: Tracking, traced: bool) -> Result<(Tensor, Option<BlockTrace>)> {
        let mut trace = traced.then(BlockTrace::default);
        let pair = self.synthesize_prefix(styles, t, trace.as_mut())?;
        let low = styles.narrow(1, self.config.high_style_count(), self.config.low_style_count())?;
        let img = self.synthesize_suffix(&pair, &low, t, trace.as_mut())?;
        if let Some(tr) = trace.as_mut() {
            tr.pair = Some(pair);
        }
        Ok((img, trace))
    }

    /// Synthesis of single style codes with weight checks; frozen weights.
    pub fn synthesize_unconditional(
        &self,
        styles: &[&StyleCode],
        traced: bool,
    ) -> Result<(Tensor, Option<BlockTrace>)> {
        self.check_finite()?;
        for s in styles {
            if s.rows() != self.config.total_styles() || s.dim() != self.config.style_dim {
                return Err(dim_err(format!(
                    "style code is {}×{}, generator expects {}×{}",
                    s.rows(),
                    s.dim(),
                    self.config.total_styles(),
                    self.config.style_dim
                )));
            }
        }
        let st = StyleCode::stack(styles, &self.device)?;
        let (img, trace) = self.synthesize(&st, Tracking::Frozen, traced)?;
        Ok((img.clamp(-1f32, 1f32)?, trace))
    }

    /// Runs only the post-replacement levels (frozen weights).
    pub fn inject_intermediates(
        &self,
        pair: &IntermediatePair,
        low_styles: &Tensor,
    ) -> Result<Tensor> {
        Ok(self
            .synthesize_suffix(pair, low_styles, Tracking::Frozen, None)?
            .clamp(-1f32, 1f32)?)
    }

    /// Draws `n` style codes from standard-normal latents through the mapping network.
    pub fn sample_styles<R: Rng>(&self, rng: &mut R, n: usize) -> Result<Vec<StyleCode>> {
        let d = self.config.style_dim;
        let z = randn_var(rng, &[n, d], 1.0, &self.device)?;
        let w = self.map(z.as_tensor(), Tracking::Frozen)?;
        let w = w.to_vec2::<f32>()?;
        let l = self.config.total_styles();
        let split = self.config.high_style_count();
        w.into_iter()
            .map(|row| {
                let mut v = Vec::with_capacity(l * d);
                for _ in 0..l {
                    v.extend_from_slice(&row);
                }
                StyleCode::new(v, l, d, split)
            })
            .collect()
    }

    /// (parameters up to and including the replacement level, parameters of
    /// the levels after it).
    pub fn params_split(&self) -> (NamedVars, NamedVars) {
        let r = self.config.replacement_res;
        let mut pre = Vec::new();
        let mut post = Vec::new();
        pre.push(("generator.constant".to_string(), self.constant.clone()));
        for (i, layer) in self.mapping.iter().enumerate() {
            // the mapping network feeds every style row, including low ones
            post.extend(layer.named_params(&format!("generator.mapping.{i}")));
        }
        for (i, level) in self.levels.iter().enumerate() {
            let p = format!("generator.levels.{i}");
            let named = level.named(&p);
            if level.res > r {
                post.extend(named);
            } else {
                // ToRGB at r reads the first low row but is replaced wholesale
                pre.extend(named);
            }
        }
        (pre, post)
    }
}

impl Level {
    fn named(&self, prefix: &str) -> Vec<(String, Var)> {
        let mut out = self.convs.named_params(&join(prefix, "convs"));
        out.extend(self.to_rgb.named_params(&join(prefix, "to_rgb")));
        out
    }
}

impl Parameterized for Generator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        f(join(prefix, "constant"), &self.constant);
        self.mapping.visit(&join(prefix, "mapping"), f);
        for (i, level) in self.levels.iter().enumerate() {
            let p = join(prefix, &format!("levels.{i}"));
            level.convs.visit(&join(&p, "convs"), f);
            level.to_rgb.visit(&join(&p, "to_rgb"), f);
        }
    }
}
