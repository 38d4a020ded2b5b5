//! Exact nearest-neighbour indexes over sketch embeddings and poses.
//!
//! An index directory holds `manifest.json` ([`IndexManifest`]),
//! `embeddings.f32` (row-major n×d little-endian f32) and, for indexes that
//! carry previews, `previews.u8` (n rasters of res² bytes, 0 or 1).

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::embedder::SketchEmbedder;
use crate::data::components::{resample_patch, Category, ComponentEntry, Rect};
use crate::data::PoseTriplet;
use crate::error::{Error, Result};

pub const INDEX_FORMAT: &str = "sketchstyle-index";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rect: Option<Rect>,
    pub pose: PoseTriplet,
}

/// One row to index: its metadata, the raster the embedder sees and an
/// optional square preview kept for clients (contours for shadow guidance,
/// patches for candidate overlays).
#[derive(Debug, Clone, PartialEq)]
pub struct IndexItem {
    pub entry: IndexEntry,
    pub raster: Vec<f32>,
    pub preview: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format: String,
    pub version: u32,
    pub category: String,
    pub dim: usize,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preview_res: Option<usize>,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    category: String,
    dim: usize,
    entries: Vec<IndexEntry>,
    embeddings: Vec<f32>,
    preview_res: Option<usize>,
    previews: Vec<u8>,
}

/// (distance, id) ascending.
fn by_distance(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1))
}

pub fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

impl RetrievalIndex {
    /// Rows are ordered by id, so the result does not depend on item order.
    pub fn build(category: &str, embedder: &SketchEmbedder, mut items: Vec<IndexItem>) -> Result<Self> {
        let mut seen = HashSet::new();
        for it in &items {
            if !seen.insert(it.entry.id.clone()) {
                return Err(Error::Retrieval(format!("duplicate index id {}", it.entry.id)));
            }
        }
        items.sort_by(|a, b| a.entry.id.cmp(&b.entry.id));
        let preview_res = items
            .first()
            .and_then(|i| i.preview.as_ref())
            .map(|c| (c.len() as f64).sqrt() as usize);
        let mut previews = Vec::new();
        for it in &items {
            match (&it.preview, preview_res) {
                (Some(c), Some(r)) if c.len() == r * r => previews.extend(c.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)),
                (None, None) => {}
                _ => return Err(Error::Dimension(format!("entry {} has an inconsistent preview", it.entry.id))),
            }
        }
        let rasters: Vec<&[f32]> = items.iter().map(|i| i.raster.as_slice()).collect();
        let codes = embedder.embed(&rasters)?;
        let dim = embedder.dim();
        let mut embeddings = Vec::with_capacity(items.len() * dim);
        for c in &codes {
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Corruption("non-finite embedding".into()));
            }
            embeddings.extend_from_slice(c);
        }
        Ok(Self {
            category: category.to_string(),
            dim,
            entries: items.into_iter().map(|i| i.entry).collect(),
            embeddings,
            preview_res,
            previews,
        })
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn embedding(&self, row: usize) -> &[f32] {
        &self.embeddings[row * self.dim..(row + 1) * self.dim]
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.entries.binary_search_by(|e| e.id.as_str().cmp(id)).ok()
    }

    pub fn entry(&self, id: &str) -> Option<&IndexEntry> {
        self.row_of(id).map(|r| &self.entries[r])
    }

    pub fn preview_res(&self) -> Option<usize> {
        self.preview_res
    }

    /// Stored preview raster of a row in [0, 1]; for contour indexes this
    /// is the binary contour.
    pub fn preview(&self, row: usize) -> Option<Vec<f32>> {
        let r = self.preview_res?;
        let n = r * r;
        Some(self.previews[row * n..(row + 1) * n].iter().map(|&b| b as f32 / 255.0).collect())
    }

    fn non_empty(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Retrieval(format!("index {} is empty", self.category)));
        }
        Ok(())
    }

    fn top_k(&self, k: usize, dist: impl Fn(usize) -> f64) -> Result<Vec<String>> {
        self.non_empty()?;
        let mut scored: Vec<(f64, &str)> = (0..self.len()).map(|i| (dist(i), self.entries[i].id.as_str())).collect();
        scored.sort_by(by_distance);
        Ok(scored.into_iter().take(k).map(|(_, id)| id.to_string()).collect())
    }

    /// Ids of the `k` rows nearest `query` in embedding space.
    pub fn nearest(&self, query: &[f32], k: usize) -> Result<Vec<String>> {
        if query.len() != self.dim {
            return Err(Error::Dimension(format!("query has {} dims, index has {}", query.len(), self.dim)));
        }
        self.top_k(k, |i| l2(self.embedding(i), query))
    }

    /// Ids of the `k` rows whose (yaw, pitch, roll) is nearest `pose`.
    pub fn nearest_pose(&self, pose: PoseTriplet, k: usize) -> Result<Vec<String>> {
        self.top_k(k, |i| self.entries[i].pose.distance(&pose))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let m = IndexManifest {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            category: self.category.clone(),
            dim: self.dim,
            count: self.entries.len(),
            preview_res: self.preview_res,
            entries: self.entries.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&m)?)?;
        let bytes: Vec<u8> = self.embeddings.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join("embeddings.f32"), bytes)?;
        if self.preview_res.is_some() {
            fs::write(dir.join("previews.u8"), &self.previews)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: IndexManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if m.format != INDEX_FORMAT {
            return Err(Error::Corruption(format!("{} is not an index manifest", dir.display())));
        }
        if m.version != INDEX_VERSION {
            return Err(Error::Version {
                found: m.version,
                expected: INDEX_VERSION,
            });
        }
        let raw = fs::read(dir.join("embeddings.f32"))?;
        if m.entries.len() != m.count || raw.len() != m.count * m.dim * 4 {
            return Err(Error::Corruption(format!("index {} has {} embedding bytes for {} rows", m.category, raw.len(), m.count)));
        }
        if m.entries.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(Error::Corruption("index rows are not sorted by unique id".into()));
        }
        let embeddings = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let previews = match m.preview_res {
            Some(r) => {
                let c = fs::read(dir.join("previews.u8"))?;
                if c.len() != m.count * r * r {
                    return Err(Error::Corruption("preview file size mismatch".into()));
                }
                c
            }
            None => Vec::new(),
        };
        Ok(Self {
            category: m.category,
            dim: m.dim,
            entries: m.entries,
            embeddings,
            preview_res: m.preview_res,
            previews,
        })
    }
}

/// Index rows for one category's component entries; patches are resampled
/// to the embedder's input size and ids are `<source>:<category>`.
pub fn component_items(entries: &[ComponentEntry], category: Category, size: usize) -> Vec<IndexItem> {
    entries
        .iter()
        .filter(|e| e.category == category)
        .map(|e| {
            let raster = resample_patch(&e.patch, e.rect.w, e.rect.h, size);
            IndexItem {
                entry: IndexEntry {
                    id: format!("{}:{}", e.source_id, category.name()),
                    source_id: e.source_id.clone(),
                    rect: Some(e.rect),
                    pose: e.pose,
                },
                preview: Some(raster.clone()),
                raster,
            }
        })
        .collect()
}

pub fn retrieve_component(index: &RetrievalIndex, embedder: &SketchEmbedder, query: &[f32], k: usize) -> Result<Vec<String>> {
    index.non_empty()?;
    let e = embedder.embed(&[query])?.pop().expect("one query");
    index.nearest(&e, k)
}

pub fn retrieve_global_by_pose(index: &RetrievalIndex, pose: PoseTriplet, k: usize) -> Result<Vec<String>> {
    index.nearest_pose(pose, k)
}

/// Pixelwise mean of binary previews.
pub fn merge_shadow(previews: &[&[f32]]) -> Result<Vec<f32>> {
    let first = previews.first().ok_or_else(|| Error::Retrieval("no previews to merge".into()))?;
    if previews.iter().any(|c| c.len() != first.len()) {
        return Err(Error::Dimension("previews differ in size".into()));
    }
    let n = previews.len() as f64;
    Ok((0..first.len())
        .map(|i| (previews.iter().map(|c| c[i] as f64).sum::<f64>() / n) as f32)
        .collect())
}

/// Shadow of the stored previews of `ids`.
pub fn shadow_for(index: &RetrievalIndex, ids: &[String]) -> Result<Vec<f32>> {
    let cs: Vec<Vec<f32>> = ids
        .iter()
        .map(|id| {
            let row = index.row_of(id).ok_or_else(|| Error::Retrieval(format!("unknown id {id}")))?;
            index
                .preview(row)
                .ok_or_else(|| Error::Retrieval(format!("index {} stores no previews", index.category())))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[f32]> = cs.iter().map(|c| c.as_slice()).collect();
    merge_shadow(&refs)
}

/// Candidates sorted by embedding distance to `strokes`; equal distances
/// keep their input order.
pub fn rerank_by_strokes(
    candidates: &[String],
    strokes: &[f32],
    embedder: &SketchEmbedder,
    index: &RetrievalIndex,
) -> Result<Vec<String>> {
    let rows: Vec<usize> = candidates
        .iter()
        .map(|id| index.row_of(id).ok_or_else(|| Error::Retrieval(format!("unknown candidate id {id}"))))
        .collect::<Result<_>>()?;
    let q = embedder.embed(&[strokes])?.pop().expect("one query");
    if q.len() != index.dim() {
        return Err(Error::Dimension(format!("embedder has {} dims, index has {}", q.len(), index.dim())));
    }
    let mut scored: Vec<(f64, &String)> = rows.iter().zip(candidates).map(|(&r, id)| (l2(index.embedding(r), &q), id)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(scored.into_iter().map(|(_, id)| id.clone()).collect())
}
