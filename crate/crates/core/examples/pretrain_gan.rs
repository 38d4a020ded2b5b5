//! Adversarial pretraining of the desk generator on procedural faces.
//!
//! `cargo run --release --example pretrain_gan -- [steps]`

use candle_core::Device;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchstyle::data::generate_procedural_corpus;
use sketchstyle::losses::{PerceptualExtractor, DEFAULT_EXTRACTOR_SEED};
use sketchstyle::model::{Generator, GeneratorConfig};
use sketchstyle::training::{pretrain_generator, GanConfig};

fn main() -> sketchstyle::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let dev = Device::Cpu;
    let g = Generator::new(&GeneratorConfig::desk(), &mut ChaCha8Rng::seed_from_u64(1), &dev)?;
    let corpus: Vec<_> = generate_procedural_corpus(256, 1, 64).into_iter().map(|s| s.image).collect();
    let ex = PerceptualExtractor::new(DEFAULT_EXTRACTOR_SEED, &dev)?;
    let cfg = GanConfig {
        steps,
        fid_samples: 128,
        ..Default::default()
    };
    let report = pretrain_generator(&g, &corpus, &cfg, &ex, |s| {
        if s.step % 25 == 0 {
            println!("step {:>4}  d {:.4}  g {:.4}", s.step, s.d_loss, s.g_loss);
        }
    })?;
    println!("desk-FID {:.3} -> {:.3}", report.baseline_fid, report.final_fid);
    Ok(())
}
