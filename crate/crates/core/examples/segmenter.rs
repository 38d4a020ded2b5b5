//! Trains the label-map segmenter on procedural faces and labels a held-out
//! image.
//!
//! `cargo run --release --example segmenter`

use candle_core::Device;
use sketchstyle::data::{extract_labels, generate_procedural_corpus, pixel_accuracy, LabelSchema, SegmenterTraining};
use sketchstyle::pipeline::train_segmenter;

fn main() -> sketchstyle::Result<()> {
    let corpus = generate_procedural_corpus(120, 3, 64);
    let opts = SegmenterTraining {
        steps: 150,
        ..Default::default()
    };
    let (seg, acc) = train_segmenter(&corpus, 100, opts, &Device::Cpu)?;
    println!("held-out pixel accuracy after {} steps: {acc:.3}", opts.steps);

    let probe = &corpus[110];
    let labels = extract_labels(&probe.image, &seg)?;
    let schema = LabelSchema::desk();
    println!("sample {}: accuracy {:.3}", probe.index, pixel_accuracy(&labels, &probe.labels));
    for (i, name) in schema.names.iter().enumerate() {
        let n = labels.iter().filter(|&&l| l as usize == i).count();
        println!("  {name:<10} {n:>5} px");
    }
    Ok(())
}
