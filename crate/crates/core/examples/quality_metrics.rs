//! Reconstruction metrics and perceptual losses between a procedural face and
//! perturbed copies.
//!
//! `cargo run --release --example quality_metrics`

use candle_core::{Device, Tensor};
use sketchstyle::data::generate_procedural_corpus;
use sketchstyle::losses::{global_perceptual, l1_loss, local_perceptual, PerceptualExtractor, DEFAULT_EXTRACTOR_SEED};
use sketchstyle::metrics::{compute_psnr, compute_ssim, desk_fid};

fn main() -> sketchstyle::Result<()> {
    let dev = Device::Cpu;
    let ex = PerceptualExtractor::new(DEFAULT_EXTRACTOR_SEED, &dev)?;
    let faces = generate_procedural_corpus(64, 4, 64);
    let imgs = faces.iter().map(|s| s.image.to_tensor(&dev)).collect::<sketchstyle::Result<Vec<_>>>()?;
    let batch = Tensor::cat(&imgs, 0)?;
    let gt = batch.narrow(0, 0, 1)?;

    // tensors are in [-1, 1]; SSIM and PSNR are taken in [0, 1]
    let unit = |t: &Tensor| (t + 1.0).and_then(|t| t / 2.0);
    let noise = (Tensor::randn(0f32, 0.2, gt.shape(), &dev)? + &gt)?.clamp(-1f32, 1f32)?;
    let darker = (&gt - 0.4)?.clamp(-1f32, 1f32)?;
    for (name, other) in [("identical", gt.clone()), ("noise 0.2", noise), ("darker", darker)] {
        let l1: f32 = l1_loss(&gt, &other)?.to_scalar()?;
        let glob: f32 = global_perceptual(&gt, &other, &ex, 32)?.to_scalar()?;
        let loc: f32 = local_perceptual(&gt, &other, &ex, 20, 16, 0)?.to_scalar()?;
        let ssim = compute_ssim(&unit(&gt)?, &unit(&other)?)?;
        let psnr = compute_psnr(&unit(&gt)?, &unit(&other)?, 1.0)?;
        println!("{name:<10} L1 {l1:.4}  global {glob:.4}  local {loc:.4}  SSIM {ssim:.4}  PSNR {psnr:.2}");
    }

    let a = batch.narrow(0, 0, 32)?;
    let b = batch.narrow(0, 32, 32)?;
    println!("desk-FID between two halves of the corpus: {:.4}", desk_fid(&a, &b, &ex)?);
    println!("desk-FID against a darker copy: {:.4}", desk_fid(&a, &(&b - 0.4)?.clamp(-1f32, 1f32)?, &ex)?);
    Ok(())
}
