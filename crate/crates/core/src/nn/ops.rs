//! Fused elementwise and resampling ops used throughout the networks.

use candle_core::{backend::BackendStorage, CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

use super::gemm::Elem;

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("{op}: expects a contiguous operand"),
    }
}

macro_rules! map1 {
    ($name:expr, $s:expr, $l:expr, |$a:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(v) => {
                let $a = contiguous(v, $l, $name)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(v) => {
                let $a = contiguous(v, $l, $name)?;
                CpuStorage::F64($body)
            }
            other => candle_core::bail!("{}: unsupported dtype {:?}", $name, other.dtype()),
        }
    };
}

macro_rules! map2 {
    ($name:expr, $s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(x), CpuStorage::F32(y)) => {
                let $a = contiguous(x, $l1, $name)?;
                let $b = contiguous(y, $l2, $name)?;
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(x), CpuStorage::F64(y)) => {
                let $a = contiguous(x, $l1, $name)?;
                let $b = contiguous(y, $l2, $name)?;
                CpuStorage::F64($body)
            }
            (x, _) => candle_core::bail!("{}: unsupported dtype {:?}", $name, x.dtype()),
        }
    };
}

trait Scalar: Elem {
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

fn lrelu_fwd<T: Scalar>(x: &[T], slope: f64, gain: f64) -> Vec<T> {
    let (pos, neg) = (T::from_f64(gain), T::from_f64(gain * slope));
    x.iter()
        .map(|&v| if v > T::default() { v * pos } else { v * neg })
        .collect()
}

fn lrelu_bwd<T: Scalar>(x: &[T], g: &[T], slope: f64, gain: f64) -> Vec<T> {
    let (pos, neg) = (T::from_f64(gain), T::from_f64(gain * slope));
    x.iter()
        .zip(g)
        .map(|(&v, &d)| if v > T::default() { d * pos } else { d * neg })
        .collect()
}

struct LeakyRelu {
    slope: f64,
    gain: f64,
}

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = map1!(self.name(), s, l, |x| lrelu_fwd(x, self.slope, self.gain));
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad.contiguous()?;
        Ok(Some(arg.apply_op2_no_bwd(
            &g,
            &LeakyReluGrad {
                slope: self.slope,
                gain: self.gain,
            },
        )?))
    }
}

struct LeakyReluGrad {
    slope: f64,
    gain: f64,
}

impl CustomOp2 for LeakyReluGrad {
    fn name(&self) -> &'static str {
        "leaky-relu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = map2!(self.name(), s1, l1, s2, l2, |x, g| lrelu_bwd(x, g, self.slope, self.gain));
        Ok((out, l1.shape().clone()))
    }
}

/// `gain · leaky_relu(x, slope)`.
pub fn leaky_relu(x: &Tensor, slope: f64, gain: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(LeakyRelu { slope, gain })
}

fn up2_fwd<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::default(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let (r0, rest) = dst[2 * y * ow..].split_at_mut(ow);
            for (x_, &v) in row.iter().enumerate() {
                r0[2 * x_] = v;
                r0[2 * x_ + 1] = v;
            }
            rest[..ow].copy_from_slice(r0);
        }
    }
    out
}

fn up2_bwd<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::default(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x_ in 0..w {
                let a = src[2 * y * ow + 2 * x_];
                let b = src[2 * y * ow + 2 * x_ + 1];
                let c = src[(2 * y + 1) * ow + 2 * x_];
                let d = src[(2 * y + 1) * ow + 2 * x_ + 1];
                let mut s = a;
                s += b;
                s += c;
                s += d;
                dst[y * w + x_] = s;
            }
        }
    }
    out
}

struct Upsample2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample-nearest-2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let out = map1!(self.name(), s, l, |x| up2_fwd(x, b * c, h, w));
        Ok((out, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Upsample2xGrad)?))
    }
}

struct Upsample2xGrad;

impl CustomOp1 for Upsample2xGrad {
    fn name(&self) -> &'static str {
        "upsample-nearest-2x-grad"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h2, w2) = l.shape().dims4()?;
        let (h, w) = (h2 / 2, w2 / 2);
        let out = map1!(self.name(), s, l, |g| up2_bwd(g, b * c, h, w));
        Ok((out, Shape::from((b, c, h, w))))
    }
}

/// Nearest-neighbour 2× upsampling of a B×C×H×W tensor.
pub fn upsample2x(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2x)
}

/// Row-stochastic bilinear interpolation matrix (`out × inp`), half-pixel
/// centres, corners not aligned.
pub fn bilinear_matrix(inp: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

/// Bilinear resize of a B×C×H×W tensor; differentiable (two matmuls).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rh = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rw = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let xw = x.broadcast_matmul(&rw)?;
    rh.broadcast_matmul(&xw)
}

/// Bilinear 2× upsampling of B×C×H×W.
pub fn upsample2x_bilinear(x: &Tensor) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resize_bilinear(x, 2 * h, 2 * w)
}

/// Numerically stable log(1 + eˣ).
pub fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    let tail = ((x.abs()?.neg()?.exp()? + 1.0)?).log()?;
    x.relu()? + tail
}

/// Per-channel normalisation over the spatial dimensions of B×C×H×W.
pub fn instance_norm(x: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(2)?;
    let centred = flat.broadcast_sub(&mean)?;
    let var = centred.sqr()?.mean_keepdim(2)?;
    let out = centred.broadcast_div(&(var + eps)?.sqrt()?)?;
    out.reshape((b, c, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn leaky_relu_matches_composed_reference() {
        let dev = Device::Cpu;
        let x = Var::from_vec(vec![-2.0f64, -0.5, 0.0, 0.25, 3.0, -1.0], (2, 3), &dev).unwrap();
        let y = leaky_relu(x.as_tensor(), 0.2, 2f64.sqrt()).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let g = 2f64.sqrt();
        let want = [-0.4 * g, -0.1 * g, 0.0, 0.25 * g, 3.0 * g, -0.2 * g];
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let grads = y.sum_all().unwrap().backward().unwrap();
        let d = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(d, vec![0.2 * g, 0.2 * g, 0.2 * g, g, g, 0.2 * g]);
    }

    #[test]
    fn upsample_and_its_adjoint() {
        let dev = Device::Cpu;
        let x = Var::from_vec((0..12).map(|v| v as f64).collect::<Vec<_>>(), (1, 2, 2, 3), &dev)
            .unwrap();
        let y = upsample2x(x.as_tensor()).unwrap();
        assert_eq!(y.dims4().unwrap(), (1, 2, 4, 6));
        let v = y.i_at(&[0, 1, 3, 5]);
        assert_eq!(v, 11.0);
        let w = Tensor::from_vec((0..48).map(|v| v as f64).collect::<Vec<_>>(), (1, 2, 4, 6), &dev)
            .unwrap();
        let grads = (y * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let d = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // element (0,0,0,0) collects w at (0,0),(0,1),(1,0),(1,1)
        assert_eq!(d[0], 0.0 + 1.0 + 6.0 + 7.0);
    }

    trait At {
        fn i_at(&self, idx: &[usize]) -> f64;
    }

    impl At for Tensor {
        fn i_at(&self, idx: &[usize]) -> f64 {
            let dims = self.dims().to_vec();
            let mut flat = 0;
            for (i, &d) in idx.iter().zip(&dims) {
                flat = flat * d + i;
            }
            self.flatten_all().unwrap().to_vec1::<f64>().unwrap()[flat]
        }
    }

    #[test]
    fn bilinear_identity_and_rows_sum_to_one() {
        let m = bilinear_matrix(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m[i * 5 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
        let m = bilinear_matrix(16, 6);
        for r in m.chunks(16) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
