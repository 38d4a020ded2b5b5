//! Trains the spatial encoder against a frozen generator and compares the
//! reconstruction with the mean-image baseline and the oracle.
//!
//! `cargo run --release --example train_and_eval -- [steps]`

use candle_core::Device;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchstyle::data::{generate_procedural_corpus, SegmenterTraining, Split};
use sketchstyle::losses::{LossConfig, PerceptualExtractor, DEFAULT_EXTRACTOR_SEED};
use sketchstyle::model::{Generator, GeneratorConfig};
use sketchstyle::pipeline::{generated_dataset, train_segmenter};
use sketchstyle::training::{
    evaluate_mean_baseline, evaluate_oracle, evaluate_reconstruction, model_for, to_csv, TrainConfig, Trainer,
};

fn main() -> sketchstyle::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let dev = Device::Cpu;
    let g = Generator::new(&GeneratorConfig::desk(), &mut ChaCha8Rng::seed_from_u64(5), &dev)?;
    let seg_opts = SegmenterTraining {
        steps: 80,
        ..Default::default()
    };
    let (seg, _) = train_segmenter(&generate_procedural_corpus(60, 2, 64), 50, seg_opts, &dev)?;
    let samples = generated_dataset(&g, &seg, 160, 128, 9)?;
    let (train, test): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.split == Split::Train);

    let cfg = TrainConfig {
        steps,
        checkpoint_interval: 0,
        ..Default::default()
    };
    let ex = PerceptualExtractor::new(DEFAULT_EXTRACTOR_SEED, &dev)?;
    let mut trainer = Trainer::new(model_for(&g, &cfg)?, cfg, train.clone(), ex.clone())?;
    trainer.run(steps, |r, _| {
        if r.step % 50 == 0 {
            println!("step {:>4}  total {:.4}  l1 {:.4}", r.step, r.losses.total, r.losses.l1.unwrap_or(0.0));
        }
        Ok(true)
    })?;

    let model = &trainer.model;
    let loss = LossConfig::for_generator(model.generator_config());
    let train: Vec<_> = train.iter().collect();
    let test: Vec<_> = test.iter().collect();
    let rows = vec![
        evaluate_reconstruction("model", model, &test, &loss, &ex)?,
        evaluate_mean_baseline(&train, &test, &loss, &ex)?,
        evaluate_oracle(model, &test, &loss, &ex)?,
    ];
    print!("{}", to_csv(&rows));
    Ok(())
}
