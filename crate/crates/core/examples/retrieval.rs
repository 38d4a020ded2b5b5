//! Builds global and nose indexes over procedural faces, saves them, and runs
//! pose lookup, stroke re-ranking, shadow merging and component search.
//!
//! `cargo run --release --example retrieval -- [artifact_dir]`

use std::path::PathBuf;

use candle_core::Device;
use sketchstyle::data::components::{extract_map_contour, Category};
use sketchstyle::data::PoseTriplet;
use sketchstyle::pipeline::{component_bundle, corpus_components, global_bundle, procedural_dataset};
use sketchstyle::retrieval::{rerank_by_strokes, retrieve_component, retrieve_global_by_pose, shadow_for, EmbedderTraining};
use sketchstyle::service::IndexBundle;

fn main() -> sketchstyle::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "target/example-artifacts".into()).into();
    let dev = Device::Cpu;
    let corpus = procedural_dataset(200, 200, 21, 64)?;
    let opts = EmbedderTraining {
        steps: 60,
        ..Default::default()
    };

    let (global, rep) = global_bundle(&corpus, opts, &dev)?;
    println!("global: {} rows, embedder L1 {:.4} -> {:.4}", global.index.len(), rep.untrained_l1, rep.trained_l1);
    let comps = corpus_components(&corpus)?;
    let (nose, rep) = component_bundle(Category::Nose, &comps, opts, &dev)?;
    println!("nose:   {} rows, embedder L1 {:.4} -> {:.4}", nose.index.len(), rep.untrained_l1, rep.trained_l1);
    global.save(&out.join("global"))?;
    nose.save(&out.join("nose"))?;
    let global = IndexBundle::load(&out.join("global"), &dev)?;

    let pose = PoseTriplet::new(15.0, -5.0, 0.0);
    let ids = retrieve_global_by_pose(&global.index, pose, 8)?;
    println!("nearest poses to {pose:?}: {ids:?}");
    let target = corpus.iter().find(|s| s.id == ids[5]).expect("retrieved ids come from the corpus");
    let strokes = extract_map_contour(&target.labels, 64);
    let reranked = rerank_by_strokes(&ids, &strokes, &global.embedder, &global.index)?;
    println!("re-ranked by {}'s contour: {reranked:?}", target.id);
    let shadow = shadow_for(&global.index, &reranked)?;
    println!("shadow covers {} pixels", shadow.iter().filter(|&&v| v > 0.0).count());

    let query = &nose.index.entries()[3];
    let row = nose.index.row_of(&query.id).expect("id exists");
    let patch = nose.index.preview(row).expect("component indexes keep previews");
    let hits = retrieve_component(&nose.index, &nose.embedder, &patch, 5)?;
    println!("noses nearest {}: {hits:?}", query.id);
    Ok(())
}
