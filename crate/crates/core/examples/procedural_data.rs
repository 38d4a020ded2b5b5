//! Renders procedural faces, extracts sketches and component crops, and
//! writes a dataset directory.
//!
//! `cargo run --release --example procedural_data -- [out_dir]`

use std::path::PathBuf;

use sketchstyle::data::components::stroke_coverage;
use sketchstyle::data::{save_dataset, LabelSchema};
use sketchstyle::pipeline::{corpus_components, procedural_dataset};

fn main() -> sketchstyle::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "target/example-data".into()).into();
    let samples = procedural_dataset(40, 32, 7, 64)?;
    let comps = corpus_components(&samples)?;
    save_dataset(&out, &samples, &LabelSchema::desk())?;

    let s = &samples[0];
    let own: Vec<_> = comps.iter().filter(|c| c.source_id == s.id).cloned().collect();
    let strokes = s.sketch.iter().filter(|&&v| v > 0.5).count();
    println!("{} samples in {}", samples.len(), out.display());
    println!("sample {}: pose {:?}, {strokes} stroke pixels", s.id, s.pose.unwrap());
    for c in &own {
        println!("  {:<12} {:?}", c.category.name(), c.rect);
    }
    println!("  stroke coverage by components: {:.3}", stroke_coverage(&s.sketch, &own, 64));
    Ok(())
}
