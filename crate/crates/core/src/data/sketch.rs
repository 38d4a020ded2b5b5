//! Image → sketch extraction: a deterministic edge tracer and a small
//! trainable U-net behind the same call.

use std::collections::VecDeque;

use candle_core::{Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::raster::ColorImage;
use crate::error::{Error, Result};
use crate::nn::layers::{join, Conv2d, Parameterized, Tracking};
use crate::nn::ops::{leaky_relu, softplus, upsample2x};

/// Hysteresis thresholds on the Sobel magnitude of luma in [0, 1]; a unit
/// step edge has magnitude 4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeParams {
    pub low: f32,
    pub high: f32,
}

impl Default for EdgeParams {
    fn default() -> Self {
        Self { low: 0.12, high: 0.3 }
    }
}

pub fn sobel_magnitude(gray: &[f32], res: usize) -> Vec<f32> {
    let at = |y: isize, x: isize| -> f32 {
        let yy = y.clamp(0, res as isize - 1) as usize;
        let xx = x.clamp(0, res as isize - 1) as usize;
        gray[yy * res + xx]
    };
    let mut out = vec![0.0; res * res];
    for y in 0..res as isize {
        for x in 0..res as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * res + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Weak pixels survive only when 8-connected to a strong one.
pub fn hysteresis(mag: &[f32], res: usize, p: EdgeParams) -> Vec<bool> {
    let mut keep = vec![false; res * res];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &m) in mag.iter().enumerate() {
        if m >= p.high {
            keep[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / res) as isize, (i % res) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= res as isize || nx >= res as isize {
                    continue;
                }
                let j = ny as usize * res + nx as usize;
                if !keep[j] && mag[j] >= p.low {
                    keep[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    keep
}

/// Zhang–Suen thinning to one-pixel-wide strokes.
pub fn thin(mask: &mut [bool], res: usize) {
    let get = |m: &[bool], y: isize, x: isize| -> u8 {
        if y < 0 || x < 0 || y >= res as isize || x >= res as isize {
            0
        } else {
            m[y as usize * res + x as usize] as u8
        }
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..res as isize {
                for x in 0..res as isize {
                    if !mask[y as usize * res + x as usize] {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let n = [
                        get(mask, y - 1, x),
                        get(mask, y - 1, x + 1),
                        get(mask, y, x + 1),
                        get(mask, y + 1, x + 1),
                        get(mask, y + 1, x),
                        get(mask, y + 1, x - 1),
                        get(mask, y, x - 1),
                        get(mask, y - 1, x - 1),
                    ];
                    let b: u8 = n.iter().sum();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&k| n[k] == 0 && n[(k + 1) % 8] == 1).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let ok = if pass == 0 {
                        p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0
                    } else {
                        p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0
                    };
                    if ok {
                        remove.push(y as usize * res + x as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                mask[i] = false;
            }
        }
        if !changed {
            break;
        }
    }
}

/// Grayscale → Sobel → hysteresis → thinning; strokes are 1, background 0.
pub fn extract_edges(img: &ColorImage, p: EdgeParams) -> Vec<f32> {
    let mag = sobel_magnitude(&img.gray(), img.res);
    let mut m = hysteresis(&mag, img.res, p);
    thin(&mut m, img.res);
    m.into_iter().map(|b| b as u8 as f32).collect()
}

/// Small encoder–decoder with skip connections predicting stroke logits.
#[derive(Debug, Clone)]
pub struct SketchUNet {
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    d2: Conv2d,
    d1: Conv2d,
    out: Conv2d,
    device: Device,
}

impl SketchUNet {
    pub fn new(seed: u64, dev: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            e1: Conv2d::new(&mut rng, 3, 16, 3, 1, true, dev)?,
            e2: Conv2d::new(&mut rng, 16, 32, 3, 2, true, dev)?,
            e3: Conv2d::new(&mut rng, 32, 32, 3, 2, true, dev)?,
            d2: Conv2d::new(&mut rng, 64, 32, 3, 1, true, dev)?,
            d1: Conv2d::new(&mut rng, 48, 16, 3, 1, true, dev)?,
            out: Conv2d::new(&mut rng, 16, 1, 3, 1, true, dev)?,
            device: dev.clone(),
        })
    }

    /// (B, 3, H, W) in [−1, 1] → (B, 1, H, W) logits.
    pub fn logits(&self, x: &Tensor, t: Tracking) -> Result<Tensor> {
        let a = |v: Tensor| leaky_relu(&v, 0.2, 1.0);
        let e1 = a(self.e1.forward(x, t)?)?;
        let e2 = a(self.e2.forward(&e1, t)?)?;
        let e3 = a(self.e3.forward(&e2, t)?)?;
        let d2 = a(self.d2.forward(&Tensor::cat(&[&upsample2x(&e3)?, &e2], 1)?, t)?)?;
        let d1 = a(self.d1.forward(&Tensor::cat(&[&upsample2x(&d2)?, &e1], 1)?, t)?)?;
        Ok(self.out.forward(&d1, t)?)
    }

    pub fn predict(&self, img: &ColorImage) -> Result<Vec<f32>> {
        let l = self.logits(&img.to_tensor(&self.device)?, Tracking::Frozen)?;
        Ok(l.flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| (v > 0.0) as u8 as f32)
            .collect())
    }

    /// Fits image → sketch pairs with a per-pixel logistic loss; returns the
    /// final epoch's mean loss.
    pub fn train(&self, pairs: &[(ColorImage, Vec<f32>)], steps: usize, batch: usize, lr: f64, seed: u64) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Data("no training pairs".into()));
        }
        let vars: Vec<Var> = self.named_params("").into_iter().map(|(_, v)| v).collect();
        let mut opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut last = f64::NAN;
        let mut cursor = order.len();
        for _ in 0..steps {
            let mut idx = Vec::with_capacity(batch);
            while idx.len() < batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let imgs: Vec<&ColorImage> = idx.iter().map(|&i| &pairs[i].0).collect();
            let res = imgs[0].res;
            let x = ColorImage::batch_tensor(&imgs, &self.device)?;
            let target: Vec<f32> = idx.iter().flat_map(|&i| pairs[i].1.iter().copied()).collect();
            let target = Tensor::from_vec(target, (batch, 1, res, res), &self.device)?;
            let logits = self.logits(&x, Tracking::Trainable)?;
            // strokes are sparse; weight them up so the net does not collapse to blank
            let w = ((&target * 4.0)? + 1.0)?;
            let loss = (softplus(&logits)? - (&logits * &target)?)?;
            let loss = ((loss * w)?.sum_all()? / (batch * res * res) as f64)?;
            opt.backward_step(&loss)?;
            last = loss.to_scalar::<f32>()? as f64;
        }
        Ok(last)
    }
}

impl Parameterized for SketchUNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        for (n, l) in [
            ("e1", &self.e1),
            ("e2", &self.e2),
            ("e3", &self.e3),
            ("d2", &self.d2),
            ("d1", &self.d1),
            ("out", &self.out),
        ] {
            l.visit(&join(prefix, n), f);
        }
    }
}

#[derive(Debug, Clone)]
pub enum SketchExtractor {
    Edges(EdgeParams),
    UNet(Box<SketchUNet>),
}

impl Default for SketchExtractor {
    fn default() -> Self {
        SketchExtractor::Edges(EdgeParams::default())
    }
}

impl SketchExtractor {
    pub fn extract(&self, img: &ColorImage) -> Result<Vec<f32>> {
        match self {
            SketchExtractor::Edges(p) => Ok(extract_edges(img, *p)),
            SketchExtractor::UNet(n) => n.predict(img),
        }
    }
}

/// Edge extraction with default thresholds.
pub fn extract_sketch(img: &ColorImage) -> Vec<f32> {
    extract_edges(img, EdgeParams::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_strokes() {
        let img = ColorImage::filled(32, [0.3, 0.6, 0.2]);
        assert!(extract_sketch(&img).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_outline_is_traced() {
        let res = 32;
        let mut img = ColorImage::filled(res, [1.0; 3]);
        let (lo, hi) = (8usize, 24usize);
        for y in lo..hi {
            for x in lo..hi {
                for c in 0..3 {
                    img.set(c, y, x, 0.0);
                }
            }
        }
        let s = extract_sketch(&img);
        let near_border = |y: usize, x: usize| {
            let d_edge = |v: usize| (v as isize - lo as isize).abs().min((v as isize - hi as isize).abs());
            let inside_span = |v: usize| v + 1 >= lo && v <= hi;
            (d_edge(y) <= 1 && inside_span(x)) || (d_edge(x) <= 1 && inside_span(y))
        };
        let mut count = 0;
        for y in 0..res {
            for x in 0..res {
                if s[y * res + x] == 1.0 {
                    count += 1;
                    assert!(near_border(y, x), "stroke at ({y},{x}) off the border");
                }
            }
        }
        // each side is covered
        for &(y, x) in &[(lo, 16), (hi, 16), (16, lo), (16, hi)] {
            let hit = (y - 1..=y + 1).any(|yy| (x - 1..=x + 1).any(|xx| s[yy * res + xx] == 1.0));
            assert!(hit, "side near ({y},{x}) missing");
        }
        assert!(count >= 4 * 12);
        assert!(s.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
