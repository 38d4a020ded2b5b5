//! Trains the mask-only and both-modality encoders under one seed and prints
//! the ablation table.
//!
//! `cargo run --release --example ablation -- [steps]`

use candle_core::Device;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchstyle::data::{generate_procedural_corpus, SegmenterTraining, Split};
use sketchstyle::losses::{PerceptualExtractor, DEFAULT_EXTRACTOR_SEED};
use sketchstyle::model::{Generator, GeneratorConfig};
use sketchstyle::pipeline::{generated_dataset, train_segmenter};
use sketchstyle::training::{run_ablation_grid, AblationGrid, TrainConfig};

fn main() -> sketchstyle::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let dev = Device::Cpu;
    let g = Generator::new(&GeneratorConfig::desk(), &mut ChaCha8Rng::seed_from_u64(5), &dev)?;
    let seg_opts = SegmenterTraining {
        steps: 80,
        ..Default::default()
    };
    let (seg, _) = train_segmenter(&generate_procedural_corpus(60, 2, 64), 50, seg_opts, &dev)?;
    let (train, test): (Vec<_>, Vec<_>) = generated_dataset(&g, &seg, 120, 96, 9)?
        .into_iter()
        .partition(|s| s.split == Split::Train);
    let test: Vec<_> = test.iter().collect();

    let base = TrainConfig {
        steps,
        checkpoint_interval: 0,
        ..Default::default()
    };
    let grid = AblationGrid::standard_layout(base, g.config().replacement_res).select(&["Mask", "Both(8x8)"]);
    let ex = PerceptualExtractor::new(DEFAULT_EXTRACTOR_SEED, &dev)?;
    let report = run_ablation_grid(&grid, &g, &train, &test, &ex, |spec, _| {
        println!("trained {}", spec.name);
        Ok(())
    })?;
    print!("{}", report.to_csv());
    Ok(())
}
