//! Image-quality and distribution metrics: desk-FID, SSIM, PSNR.

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{dim_err, Error, Result};
use crate::losses::PerceptualExtractor;

pub const PSNR_CAP: f64 = 99.0;

/// Mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl DistributionStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Two-pass mean and (n − 1)-normalized covariance of row vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Data("feature statistics need at least two samples".into()));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(dim_err("feature rows of unequal length"));
        }
        let n = rows.len() as f64;
        let mut mu = DVector::zeros(d);
        for r in rows {
            mu += DVector::from_column_slice(r);
        }
        mu /= n;
        let mut sigma = DMatrix::zeros(d, d);
        for r in rows {
            let c = DVector::from_column_slice(r) - &mu;
            sigma += &c * c.transpose();
        }
        sigma /= n - 1.0;
        Ok(Self { mu, sigma })
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// ‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2}), with the cross term taken as
/// Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2}) through symmetric eigendecompositions.
pub fn compute_fid(a: &DistributionStats, b: &DistributionStats) -> Result<f64> {
    if a.dim() != b.dim() || a.sigma.nrows() != a.dim() || b.sigma.nrows() != b.dim() {
        return Err(dim_err(format!("stats of dimension {} vs {}", a.dim(), b.dim())));
    }
    let dmu = (&a.mu - &b.mu).norm_squared();
    let ra = sym_sqrt(&a.sigma);
    let m = &ra * &b.sigma * &ra;
    let m = (&m + m.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let fid = dmu + a.sigma.trace() + b.sigma.trace() - 2.0 * cross;
    Ok(fid.max(0.0))
}

/// Desk-FID feature statistics: pooled extractor activations of an image set
/// (N, 3, H, W) in [−1, 1], processed in chunks.
pub fn feature_stats(images: &Tensor, extractor: &PerceptualExtractor) -> Result<DistributionStats> {
    let (n, _, _, _) = images.dims4()?;
    if n < 2 {
        return Err(Error::Data("feature statistics need at least two images".into()));
    }
    let mut rows = Vec::with_capacity(n);
    let chunk = 32;
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let p = extractor.pooled(&images.narrow(0, start, len)?)?;
        for r in p.to_dtype(DType::F64)?.to_vec2::<f64>()? {
            rows.push(r);
        }
        start += len;
    }
    DistributionStats::from_rows(&rows)
}

pub fn desk_fid(a: &Tensor, b: &Tensor, extractor: &PerceptualExtractor) -> Result<f64> {
    compute_fid(&feature_stats(a, extractor)?, &feature_stats(b, extractor)?)
}

fn planes(t: &Tensor) -> Result<(Vec<f64>, usize, usize, usize)> {
    let t = t.to_dtype(DType::F64)?;
    let (p, h, w) = match t.dims() {
        [c, h, w] => (*c, *h, *w),
        [b, c, h, w] => (b * c, *h, *w),
        d => return Err(dim_err(format!("expected a CHW or BCHW image, got {d:?}"))),
    };
    Ok((t.flatten_all()?.to_vec1::<f64>()?, p, h, w))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering of one plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            tmp[y * ow + xo] = (0..k).map(|i| g[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..k).map(|i| g[i] * tmp[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5, K1 = 0.01, K2 = 0.03,
/// data range 1), averaged over channels. Inputs are CHW or BCHW in [0, 1];
/// the window shrinks to the image size for images smaller than 11 px.
pub fn compute_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(dim_err(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let (xa, p, h, w) = planes(a)?;
    let (xb, _, _, _) = planes(b)?;
    let g = gaussian_window(11.min(h).min(w), 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let hw = h * w;
    let mut total = 0.0;
    for i in 0..p {
        let pa = &xa[i * hw..(i + 1) * hw];
        let pb = &xb[i * hw..(i + 1) * hw];
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(pa, h, w, &g);
        let mu_b = filter_valid(pb, h, w, &g);
        let s_aa = filter_valid(&aa, h, w, &g);
        let s_bb = filter_valid(&bb, h, w, &g);
        let s_ab = filter_valid(&ab, h, w, &g);
        let mut acc = 0.0;
        for j in 0..mu_a.len() {
            let (ma, mb) = (mu_a[j], mu_b[j]);
            let va = s_aa[j] - ma * ma;
            let vb = s_bb[j] - mb * mb;
            let cov = s_ab[j] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / p as f64)
}

/// 10·log10(max² / MSE); identical inputs give [`PSNR_CAP`].
pub fn compute_psnr(a: &Tensor, b: &Tensor, max_value: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(dim_err(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let mse = (a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?
        .sqr()?
        .mean_all()?
        .to_scalar::<f64>()?;
    Ok(psnr_from_mse(mse, max_value))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP)
}
