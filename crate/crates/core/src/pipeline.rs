//! End-to-end steps shared by the command line, the examples and the
//! acceptance suite.

use candle_core::Device;

use crate::data::components::{decompose_components, extract_map_contour, Category, ComponentEntry};
use crate::data::{
    build_training_samples, generate_procedural_corpus, pixel_accuracy, procedural_samples, sample_generator_dataset,
    PoseTriplet, ProceduralSample, Segmenter, SegmenterConfig, SegmenterTraining, SketchExtractor, TrainingSample,
};
use crate::error::{Error, Result};
use crate::model::Generator;
use crate::retrieval::{
    component_items, EmbedderConfig, EmbedderReport, EmbedderTraining, IndexEntry, IndexItem, RetrievalIndex, SketchEmbedder,
};
use crate::service::IndexBundle;

pub const DILATION_RADIUS: usize = 2;

/// Segmenter fitted on the first `n_train` procedural samples; returns it
/// with its mean pixel accuracy on the rest.
pub fn train_segmenter(corpus: &[ProceduralSample], n_train: usize, opts: SegmenterTraining, dev: &Device) -> Result<(Segmenter, f64)> {
    if n_train == 0 || n_train >= corpus.len() {
        return Err(Error::Data("segmenter needs both training and held-out samples".into()));
    }
    let mut seg = Segmenter::new(SegmenterConfig::default(), dev)?;
    let train: Vec<_> = corpus[..n_train].iter().map(|s| (&s.image, s.labels.as_slice())).collect();
    seg.train(&train, opts)?;
    let held = &corpus[n_train..];
    let imgs: Vec<_> = held.iter().map(|s| &s.image).collect();
    let pred = seg.predict(&imgs)?;
    let acc = pred.iter().zip(held).map(|(p, s)| pixel_accuracy(p, &s.labels)).sum::<f64>() / held.len() as f64;
    Ok((seg, acc))
}

/// Generator-sampled quadruples: styles, images, edge sketches and
/// segmenter labels.
pub fn generated_dataset(generator: &Generator, segmenter: &Segmenter, n: usize, n_train: usize, seed: u64) -> Result<Vec<TrainingSample>> {
    let pairs = sample_generator_dataset(generator, n, seed)?;
    build_training_samples(pairs, n_train, &SketchExtractor::default(), segmenter)
}

fn pose_of(s: &TrainingSample) -> Result<PoseTriplet> {
    s.pose
        .ok_or_else(|| Error::Data(format!("sample {} has no pose; retrieval corpora need poses", s.id)))
}

/// Components of every sample, cut from its sketch and labels.
pub fn corpus_components(corpus: &[TrainingSample]) -> Result<Vec<ComponentEntry>> {
    let mut out = Vec::new();
    for s in corpus {
        out.extend(decompose_components(&s.sketch, &s.labels, s.image.res, DILATION_RADIUS, pose_of(s)?, &s.id));
    }
    Ok(out)
}

/// Whole-face rows: the label-map contour is both the embedded raster and
/// the stored preview.
pub fn global_items(corpus: &[TrainingSample]) -> Result<Vec<IndexItem>> {
    corpus
        .iter()
        .map(|s| {
            let c = extract_map_contour(&s.labels, s.image.res);
            Ok(IndexItem {
                entry: IndexEntry {
                    id: s.id.clone(),
                    source_id: s.id.clone(),
                    rect: None,
                    pose: pose_of(s)?,
                },
                raster: c.clone(),
                preview: Some(c),
            })
        })
        .collect()
}

fn train_bundle(name: &str, cfg: EmbedderConfig, items: Vec<IndexItem>, opts: EmbedderTraining, dev: &Device) -> Result<(IndexBundle, EmbedderReport)> {
    let mut e = SketchEmbedder::new(cfg, dev)?;
    let patches: Vec<Vec<f32>> = items.iter().map(|i| i.raster.clone()).collect();
    let report = e.train(&patches, opts)?;
    let index = RetrievalIndex::build(name, &e, items)?;
    Ok((IndexBundle { index, embedder: e }, report))
}

pub fn component_bundle(
    category: Category,
    components: &[ComponentEntry],
    opts: EmbedderTraining,
    dev: &Device,
) -> Result<(IndexBundle, EmbedderReport)> {
    let cfg = EmbedderConfig::component(category.name());
    let items = component_items(components, category, cfg.input_size);
    train_bundle(category.name(), cfg, items, opts, dev)
}

pub fn global_bundle(corpus: &[TrainingSample], opts: EmbedderTraining, dev: &Device) -> Result<(IndexBundle, EmbedderReport)> {
    let res = corpus.first().map(|s| s.image.res).unwrap_or(64);
    let cfg = EmbedderConfig {
        input_size: res,
        ..EmbedderConfig::global()
    };
    train_bundle(crate::service::artifacts::GLOBAL_INDEX, cfg, global_items(corpus)?, opts, dev)
}

/// Procedural faces with exact labels, poses and edge sketches; the first
/// `n_train` are the training split.
pub fn procedural_dataset(n: usize, n_train: usize, seed: u64, res: usize) -> Result<Vec<TrainingSample>> {
    procedural_samples(&generate_procedural_corpus(n, seed, res), n_train, &SketchExtractor::default())
}
