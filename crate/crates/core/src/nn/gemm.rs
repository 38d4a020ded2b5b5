//! Thin safe wrapper over the `gemm` crate for the element types we train in.

use std::ops::{AddAssign, Mul};

pub trait Elem: Copy + Default + AddAssign + Mul<Output = Self> + PartialOrd + 'static {
    const ONE: Self;
}

impl Elem for f32 {
    const ONE: Self = 1.0;
}

impl Elem for f64 {
    const ONE: Self = 1.0;
}

#[inline]
fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `dst (m×n) = [dst +] lhs (m×k) · rhs (k×n)`, all operands given as
/// (row stride, column stride) views into slices.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into<T: Elem>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    dst_rs: usize,
    dst_cs: usize,
    accumulate: bool,
    lhs: &[T],
    lhs_rs: usize,
    lhs_cs: usize,
    rhs: &[T],
    rhs_rs: usize,
    rhs_cs: usize,
) {
    assert!(dst.len() >= extent(m, n, dst_rs, dst_cs), "gemm: dst too small");
    assert!(lhs.len() >= extent(m, k, lhs_rs, lhs_cs), "gemm: lhs too small");
    assert!(rhs.len() >= extent(k, n, rhs_rs, rhs_cs), "gemm: rhs too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    dst[i * dst_rs + j * dst_cs] = T::default();
                }
            }
        }
        return;
    }
    // SAFETY: the extents checked above bound every element gemm touches,
    // and `dst` is uniquely borrowed.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            dst_cs as isize,
            dst_rs as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            T::ONE,
            T::ONE,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}
