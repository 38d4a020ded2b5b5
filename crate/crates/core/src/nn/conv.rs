//! 2-D convolution as a candle custom op.
//!
//! Forward and both backward passes are im2col + gemm, single-threaded, so the
//! arithmetic order is fixed and results are bitwise reproducible.

use candle_core::{backend::BackendStorage, CpuStorage, CustomOp2, Layout, Shape, Tensor};

use super::gemm::{matmul_into, Elem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Geometry {
    fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.dilation * (self.kh - 1) - 1) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.dilation * (self.kw - 1) - 1) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Unfolds one image (c_in × h × w) into `cols` (col_rows × col_cols).
    fn im2col<T: Elem>(&self, img: &[T], cols: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let n = oh * ow;
        for ci in 0..self.c_in {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let off_y = (ky * self.dilation) as isize - self.padding as isize;
                    let off_x = (kx * self.dilation) as isize - self.padding as isize;
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + off_y;
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(T::default());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        if self.stride == 1 {
                            // contiguous run with zero margins
                            let lo = (-off_x).clamp(0, ow as isize) as usize;
                            let hi = ((self.w as isize - off_x).clamp(0, ow as isize)) as usize;
                            out_row[..lo].fill(T::default());
                            if hi > lo {
                                let s0 = (lo as isize + off_x) as usize;
                                out_row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                            }
                            if hi < ow {
                                out_row[hi.max(lo)..].fill(T::default());
                            }
                        } else {
                            for (ox, o) in out_row.iter_mut().enumerate() {
                                let ix = (ox * self.stride) as isize + off_x;
                                *o = if ix < 0 || ix >= self.w as isize {
                                    T::default()
                                } else {
                                    src[ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds `cols` back, accumulating into one image gradient.
    fn col2im<T: Elem>(&self, cols: &[T], img: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let n = oh * ow;
        for ci in 0..self.c_in {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    let off_y = (ky * self.dilation) as isize - self.padding as isize;
                    let off_x = (kx * self.dilation) as isize - self.padding as isize;
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + off_y;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let in_row = &src[oy * ow..(oy + 1) * ow];
                        for (ox, &v) in in_row.iter().enumerate() {
                            let ix = (ox * self.stride) as isize + off_x;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward<T: Elem>(&self, x: &[T], k: &[T]) -> Vec<T> {
        let (kr, n) = (self.col_rows(), self.col_cols());
        let mut cols = vec![T::default(); kr * n];
        let mut out = vec![T::default(); self.batch * self.c_out * n];
        let img = self.c_in * self.h * self.w;
        for b in 0..self.batch {
            self.im2col(&x[b * img..(b + 1) * img], &mut cols);
            let dst = &mut out[b * self.c_out * n..(b + 1) * self.c_out * n];
            matmul_into(self.c_out, n, kr, dst, n, 1, false, k, kr, 1, &cols, n, 1);
        }
        out
    }

    fn backward_input<T: Elem>(&self, grad: &[T], k: &[T]) -> Vec<T> {
        let (kr, n) = (self.col_rows(), self.col_cols());
        let mut cols = vec![T::default(); kr * n];
        let img = self.c_in * self.h * self.w;
        let mut dx = vec![T::default(); self.batch * img];
        for b in 0..self.batch {
            let g = &grad[b * self.c_out * n..(b + 1) * self.c_out * n];
            // cols = kᵀ (kr × c_out) · g (c_out × n)
            matmul_into(kr, n, self.c_out, &mut cols, n, 1, false, k, 1, kr, g, n, 1);
            self.col2im(&cols, &mut dx[b * img..(b + 1) * img]);
        }
        dx
    }

    fn backward_weight<T: Elem>(&self, x: &[T], grad: &[T]) -> Vec<T> {
        let (kr, n) = (self.col_rows(), self.col_cols());
        let mut cols = vec![T::default(); kr * n];
        let img = self.c_in * self.h * self.w;
        let mut dk = vec![T::default(); self.c_out * kr];
        for b in 0..self.batch {
            self.im2col(&x[b * img..(b + 1) * img], &mut cols);
            let g = &grad[b * self.c_out * n..(b + 1) * self.c_out * n];
            // dk += g (c_out × n) · colsᵀ (n × kr)
            matmul_into(self.c_out, kr, n, &mut dk, kr, 1, b > 0, g, n, 1, &cols, 1, n);
        }
        dk
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d expects contiguous operands"),
    }
}

macro_rules! dispatch2 {
    ($name:expr, $s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(lhs), CpuStorage::F32(rhs)) => {
                let $a = contiguous_slice(lhs, $l1)?;
                let $b = contiguous_slice(rhs, $l2)?;
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(lhs), CpuStorage::F64(rhs)) => {
                let $a = contiguous_slice(lhs, $l1)?;
                let $b = contiguous_slice(rhs, $l2)?;
                CpuStorage::F64($body)
            }
            (lhs, rhs) => candle_core::bail!(
                "{}: unsupported dtypes {:?}/{:?}",
                $name,
                lhs.dtype(),
                rhs.dtype()
            ),
        }
    };
}

struct Conv2dForward(Geometry);

impl CustomOp2 for Conv2dForward {
    fn name(&self) -> &'static str {
        "fast-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = dispatch2!(self.name(), s1, l1, s2, l2, |x, k| g.forward(x, k));
        Ok((out, Shape::from((g.batch, g.c_out, g.out_h(), g.out_w()))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        k: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(k, &Conv2dInputGrad(self.0))?;
        let dk = x.apply_op2_no_bwd(&grad, &Conv2dWeightGrad(self.0))?;
        Ok((Some(dx), Some(dk)))
    }
}

struct Conv2dInputGrad(Geometry);

impl CustomOp2 for Conv2dInputGrad {
    fn name(&self) -> &'static str {
        "fast-conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = dispatch2!(self.name(), s1, l1, s2, l2, |gr, k| g.backward_input(gr, k));
        Ok((out, Shape::from((g.batch, g.c_in, g.h, g.w))))
    }
}

struct Conv2dWeightGrad(Geometry);

impl CustomOp2 for Conv2dWeightGrad {
    fn name(&self) -> &'static str {
        "fast-conv2d-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = dispatch2!(self.name(), s1, l1, s2, l2, |x, gr| g.backward_weight(x, gr));
        Ok((out, Shape::from((g.c_out, g.c_in, g.kh, g.kw))))
    }
}

/// Convolves `x` (B × Cin × H × W) with `kernel` (Cout × Cin × Kh × Kw).
pub fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> candle_core::Result<Tensor> {
    let (batch, c_in, h, w) = x.dims4()?;
    let (c_out, k_in, kh, kw) = kernel.dims4()?;
    if k_in != c_in {
        candle_core::bail!("conv2d: input has {c_in} channels, kernel expects {k_in}");
    }
    if stride == 0 || dilation == 0 {
        candle_core::bail!("conv2d: stride and dilation must be positive");
    }
    if h + 2 * padding < dilation * (kh - 1) + 1 || w + 2 * padding < dilation * (kw - 1) + 1 {
        candle_core::bail!("conv2d: kernel larger than padded input");
    }
    let geom = Geometry {
        batch,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        padding,
        dilation,
    };
    x.contiguous()?
        .apply_op2(&kernel.contiguous()?, Conv2dForward(geom))
}
