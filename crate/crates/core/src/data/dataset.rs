//! Generator-sampled training quadruples and the on-disk dataset layout.
//!
//! A dataset directory holds `manifest.jsonl` (one [`ManifestEntry`] per
//! line) and, per sample, `images/<id>.png` (RGB), `sketches/<id>.png`
//! (gray, strokes 255), `labels/<id>.png` (indexed with the schema palette)
//! and, for generated samples, `styles/<id>.bin` (raw f32 style code).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use candle_core::Tensor;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::procedural::{sample_rng, PoseTriplet, ProceduralSample};
use super::raster::{
    decode_labels_png, decode_rgb_png, decode_sketch_png, encode_labels_png, encode_rgb_png, encode_sketch_png,
    ColorImage,
};
use super::schema::LabelSchema;
use super::segment::Segmenter;
use super::sketch::SketchExtractor;
use crate::error::{Error, Result};
use crate::model::{ConditionPair, Generator, StyleCode};
use crate::nn::layers::Tracking;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    pub split: Split,
    pub image: ColorImage,
    pub sketch: Vec<f32>,
    pub labels: Vec<u8>,
    pub style: Option<StyleCode>,
    pub pose: Option<PoseTriplet>,
}

impl TrainingSample {
    pub fn condition(&self) -> Result<ConditionPair> {
        ConditionPair::new(self.image.res, self.sketch.clone(), self.labels.clone())
    }

    pub fn require_style(&self) -> Result<&StyleCode> {
        self.style
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sample {} has no paired style code", self.id)))
    }
}

/// One manifest line; paths are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image: String,
    pub sketch: String,
    pub labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseTriplet>,
}

/// Fixed chunk so results never depend on caller batching.
const SYNTH_CHUNK: usize = 16;

/// Style codes drawn from per-index normal latents through the mapping
/// network, and the frozen generator's image for each.
pub fn sample_generator_dataset(generator: &Generator, n: usize, seed: u64) -> Result<Vec<(StyleCode, ColorImage)>> {
    let cfg = generator.config();
    let (d, l, split) = (cfg.style_dim, cfg.total_styles(), cfg.high_style_count());
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = SYNTH_CHUNK.min(n - start);
        let mut z = Vec::with_capacity(len * d);
        for i in start..start + len {
            let mut rng = sample_rng(seed, i);
            z.extend((0..d).map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            }));
        }
        let z = Tensor::from_vec(z, (len, d), generator.device())?;
        let w = generator.map(&z, Tracking::Frozen)?.to_vec2::<f32>()?;
        let styles: Vec<StyleCode> = w
            .into_iter()
            .map(|row| {
                let mut v = Vec::with_capacity(l * d);
                for _ in 0..l {
                    v.extend_from_slice(&row);
                }
                StyleCode::new(v, l, d, split)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&StyleCode> = styles.iter().collect();
        let (img, _) = generator.synthesize_unconditional(&refs, false)?;
        for (s, im) in styles.into_iter().zip(ColorImage::batch_from_tensor(&img)?) {
            out.push((s, im));
        }
        start += len;
    }
    Ok(out)
}

/// First `n_train` samples are training, the rest test.
pub fn split_of(index: usize, n_train: usize) -> Split {
    if index < n_train {
        Split::Train
    } else {
        Split::Test
    }
}

/// Attaches extracted sketches and predicted labels to generated pairs.
pub fn build_training_samples(
    pairs: Vec<(StyleCode, ColorImage)>,
    n_train: usize,
    sketcher: &SketchExtractor,
    segmenter: &Segmenter,
) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk_start in (0..pairs.len()).step_by(64) {
        let chunk = &pairs[chunk_start..(chunk_start + 64).min(pairs.len())];
        let imgs: Vec<&ColorImage> = chunk.iter().map(|(_, im)| im).collect();
        let labels = segmenter.predict(&imgs)?;
        for (k, ((style, image), labels)) in chunk.iter().zip(labels).enumerate() {
            let i = chunk_start + k;
            out.push(TrainingSample {
                id: format!("g{i:05}"),
                split: split_of(i, n_train),
                sketch: sketcher.extract(image)?,
                image: image.clone(),
                labels,
                style: Some(style.clone()),
                pose: None,
            });
        }
    }
    Ok(out)
}

/// Procedural samples with their exact labels and extracted sketches.
pub fn procedural_samples(corpus: &[ProceduralSample], n_train: usize, sketcher: &SketchExtractor) -> Result<Vec<TrainingSample>> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(TrainingSample {
                id: format!("p{:05}", s.index),
                split: split_of(i, n_train),
                sketch: sketcher.extract(&s.image)?,
                image: s.image.clone(),
                labels: s.labels.clone(),
                style: None,
                pose: Some(s.pose),
            })
        })
        .collect()
}

pub fn save_dataset(dir: &Path, samples: &[TrainingSample], schema: &LabelSchema) -> Result<()> {
    for sub in ["images", "sketches", "labels", "styles"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
    for s in samples {
        let res = s.image.res;
        let e = ManifestEntry {
            id: s.id.clone(),
            split: s.split,
            image: format!("images/{}.png", s.id),
            sketch: format!("sketches/{}.png", s.id),
            labels: format!("labels/{}.png", s.id),
            style: s.style.as_ref().map(|_| format!("styles/{}.bin", s.id)),
            pose: s.pose,
        };
        fs::write(dir.join(&e.image), encode_rgb_png(&s.image)?)?;
        fs::write(dir.join(&e.sketch), encode_sketch_png(&s.sketch, res)?)?;
        fs::write(dir.join(&e.labels), encode_labels_png(&s.labels, res, schema)?)?;
        if let (Some(st), Some(p)) = (&s.style, &e.style) {
            let mut buf = Vec::new();
            st.write_raw(&mut buf)?;
            fs::write(dir.join(p), buf)?;
        }
        serde_json::to_writer(&mut manifest, &e)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let f = BufReader::new(fs::File::open(dir.join("manifest.jsonl"))?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("manifest line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

/// `style_split`: the high-row count to attach to loaded style codes.
pub fn load_dataset(dir: &Path, schema: &LabelSchema, style_split: usize) -> Result<Vec<TrainingSample>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            let image = decode_rgb_png(&fs::read(dir.join(&e.image))?)?;
            let (sketch, sres) = decode_sketch_png(&fs::read(dir.join(&e.sketch))?)?;
            let (labels, lres) = decode_labels_png(&fs::read(dir.join(&e.labels))?, schema)?;
            if sres != image.res || lres != image.res {
                return Err(Error::Data(format!("sample {} has misaligned rasters", e.id)));
            }
            let style = match &e.style {
                Some(p) => Some(StyleCode::read_raw(&fs::read(dir.join(p))?[..], style_split)?),
                None => None,
            };
            Ok(TrainingSample {
                id: e.id,
                split: e.split,
                image,
                sketch,
                labels,
                style,
                pose: e.pose,
            })
        })
        .collect()
}

/// Total bytes under `dir`.
pub fn dir_size(dir: &Path) -> Result<u64> {
    let mut total = 0;
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let md = entry.metadata()?;
        total += if md.is_dir() { dir_size(&entry.path())? } else { md.len() };
    }
    Ok(total)
}
