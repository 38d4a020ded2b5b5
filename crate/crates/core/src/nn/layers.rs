//! Parameterised layers with equalised-learning-rate weight scaling.
//!
//! Weights are stored as unit-variance [`Var`]s and multiplied by
//! `1/sqrt(fan_in)` at run time. A layer never owns its tracking decision:
//! every forward takes a [`Tracking`] so the same weights can be trained in
//! one context and frozen in another.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use super::conv::conv2d;
use super::ops::{leaky_relu, upsample2x_bilinear};

/// Whether gradients should flow into a layer's own parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tracking {
    Trainable,
    Frozen,
}

impl Tracking {
    pub fn bind(self, var: &Var) -> Tensor {
        match self {
            Tracking::Trainable => var.as_tensor().clone(),
            Tracking::Frozen => var.as_tensor().detach(),
        }
    }
}

/// Visitor over named parameters, used by checkpoints and partitions.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var));

    fn named_params(&self, prefix: &str) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, v| out.push((n, v.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.elem_count());
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn randn_var<R: Rng>(rng: &mut R, shape: &[usize], std: f64, dev: &Device) -> candle_core::Result<Var> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
        .collect();
    Var::from_vec(data, shape, dev)
}

pub fn const_var(value: f32, shape: &[usize], dev: &Device) -> candle_core::Result<Var> {
    let n: usize = shape.iter().product();
    Var::from_vec(vec![value; n], shape, dev)
}

fn cast(t: Tensor, dtype: DType) -> candle_core::Result<Tensor> {
    if t.dtype() == dtype {
        Ok(t)
    } else {
        t.to_dtype(dtype)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    scale: f64,
}

impl Conv2d {
    pub fn new<R: Rng>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        dev: &Device,
    ) -> candle_core::Result<Self> {
        Ok(Self {
            weight: randn_var(rng, &[c_out, c_in, kernel, kernel], 1.0, dev)?,
            bias: if bias { Some(const_var(0.0, &[c_out], dev)?) } else { None },
            stride,
            padding: kernel / 2,
            dilation: 1,
            scale: 1.0 / ((c_in * kernel * kernel) as f64).sqrt(),
        })
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        let k = self.weight.dims()[2];
        self.dilation = dilation;
        self.padding = dilation * (k / 2);
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor, t: Tracking) -> candle_core::Result<Tensor> {
        let w = (cast(t.bind(&self.weight), x.dtype())? * self.scale)?;
        let y = conv2d(x, &w, self.stride, self.padding, self.dilation)?;
        match &self.bias {
            Some(b) => {
                let b = cast(t.bind(b), x.dtype())?;
                y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)
            }
            None => Ok(y),
        }
    }
}

impl Parameterized for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
    scale: f64,
    lr_mul: f64,
}

impl Linear {
    pub fn new<R: Rng>(
        rng: &mut R,
        d_in: usize,
        d_out: usize,
        bias_init: f32,
        lr_mul: f64,
        dev: &Device,
    ) -> candle_core::Result<Self> {
        Ok(Self {
            weight: randn_var(rng, &[d_out, d_in], 1.0 / lr_mul, dev)?,
            bias: const_var(bias_init / lr_mul as f32, &[d_out], dev)?,
            scale: lr_mul / (d_in as f64).sqrt(),
            lr_mul,
        })
    }

    /// `x`: (N, d_in) → (N, d_out).
    pub fn forward(&self, x: &Tensor, t: Tracking) -> candle_core::Result<Tensor> {
        let w = (cast(t.bind(&self.weight), x.dtype())? * self.scale)?;
        let b = (cast(t.bind(&self.bias), x.dtype())? * self.lr_mul)?;
        x.matmul(&w.t()?)?.broadcast_add(&b)
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

/// Style-modulated convolution: per-sample channel scaling of the input by an
/// affine projection of the style, a shared convolution, and optional
/// demodulation of the output channels. Scaling input channels before a
/// shared kernel is equivalent to convolving with per-sample modulated
/// weights, and keeps the whole batch in one convolution.
#[derive(Debug, Clone)]
pub struct ModulatedConv {
    pub affine: Linear,
    pub weight: Var,
    pub bias: Var,
    kernel: usize,
    upsample: bool,
    demodulate: bool,
    activate: bool,
    scale: f64,
}

impl ModulatedConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        style_dim: usize,
        upsample: bool,
        demodulate: bool,
        activate: bool,
        dev: &Device,
    ) -> candle_core::Result<Self> {
        Ok(Self {
            affine: Linear::new(rng, style_dim, c_in, 1.0, 1.0, dev)?,
            weight: randn_var(rng, &[c_out, c_in, kernel, kernel], 1.0, dev)?,
            bias: const_var(0.0, &[c_out], dev)?,
            kernel,
            upsample,
            demodulate,
            activate,
            scale: 1.0 / ((c_in * kernel * kernel) as f64).sqrt(),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    /// `x`: (B, C_in, H, W); `style`: (B, D).
    pub fn forward(&self, x: &Tensor, style: &Tensor, t: Tracking) -> candle_core::Result<Tensor> {
        let (b, c_in, _, _) = x.dims4()?;
        let c_out = self.out_channels();
        let s = self.affine.forward(style, t)?; // (B, C_in)
        let w = (cast(t.bind(&self.weight), x.dtype())? * self.scale)?;
        let mut h = x.broadcast_mul(&s.reshape((b, c_in, 1, 1))?)?;
        if self.upsample {
            h = upsample2x_bilinear(&h)?;
        }
        let mut y = conv2d(&h, &w, 1, self.kernel / 2, 1)?;
        if self.demodulate {
            // d[b, o] = 1 / sqrt(Σ_i s[b,i]² Σ_k w[o,i,k]² + ε)
            let w2 = w.sqr()?.sum(3)?.sum(2)?; // (C_out, C_in)
            let d = (s.sqr()?.matmul(&w2.t()?)? + 1e-8)?.sqrt()?.recip()?;
            y = y.broadcast_mul(&d.reshape((b, c_out, 1, 1))?)?;
        }
        let bias = cast(t.bind(&self.bias), x.dtype())?.reshape((1, c_out, 1, 1))?;
        y = y.broadcast_add(&bias)?;
        if self.activate {
            y = leaky_relu(&y, 0.2, std::f64::consts::SQRT_2)?;
        }
        Ok(y)
    }
}

impl Parameterized for ModulatedConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        self.affine.visit(&join(prefix, "affine"), f);
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Var)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }
}
