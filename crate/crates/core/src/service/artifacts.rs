//! On-disk artifacts a server loads: the conditional checkpoint plus an
//! artifact directory holding
//!
//! ```text
//! styles.json       style catalog (ids and raw codes)
//! segmenter.ckpt    label extractor for /extract (optional)
//! global/           contour index and its embedder.ckpt
//! <category>/       component index and its embedder.ckpt, per category
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::data::components::Category;
use crate::data::Segmenter;
use crate::error::{Error, Result};
use crate::model::{ScModel, StyleCode};
use crate::retrieval::{RetrievalIndex, SketchEmbedder};

pub const GLOBAL_INDEX: &str = "global";
pub const EMBEDDER_FILE: &str = "embedder.ckpt";
pub const STYLES_FILE: &str = "styles.json";
pub const SEGMENTER_FILE: &str = "segmenter.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogStyle {
    pub id: String,
    pub rows: usize,
    pub dim: usize,
    pub split: usize,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleCatalog {
    pub styles: Vec<CatalogStyle>,
}

impl StyleCatalog {
    pub fn from_codes(codes: &[(String, StyleCode)]) -> Self {
        Self {
            styles: codes
                .iter()
                .map(|(id, c)| CatalogStyle {
                    id: id.clone(),
                    rows: c.rows(),
                    dim: c.dim(),
                    split: c.split_index(),
                    values: c.values().to_vec(),
                })
                .collect(),
        }
    }

    pub fn codes(&self) -> Result<Vec<(String, StyleCode)>> {
        self.styles
            .iter()
            .map(|s| Ok((s.id.clone(), StyleCode::new(s.values.clone(), s.rows, s.dim, s.split)?)))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(STYLES_FILE), serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(STYLES_FILE))?)?)
    }
}

/// An index and the embedder that produced its rows.
#[derive(Debug, Clone)]
pub struct IndexBundle {
    pub index: RetrievalIndex,
    pub embedder: SketchEmbedder,
}

impl IndexBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.index.save(dir)?;
        self.embedder.save(&dir.join(EMBEDDER_FILE))
    }

    pub fn load(dir: &Path, dev: &Device) -> Result<Self> {
        let index = RetrievalIndex::load(dir)?;
        let embedder = SketchEmbedder::load(&dir.join(EMBEDDER_FILE), dev)?;
        if embedder.dim() != index.dim() {
            return Err(Error::Dimension(format!(
                "index {} has {} dims but its embedder {}",
                index.category(),
                index.dim(),
                embedder.dim()
            )));
        }
        Ok(Self { index, embedder })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub model: Option<ScModel>,
    pub styles: Vec<(String, StyleCode)>,
    pub segmenter: Option<Segmenter>,
    pub global: Option<IndexBundle>,
    pub components: BTreeMap<Category, IndexBundle>,
}

impl Artifacts {
    /// Loads whatever is present; a missing checkpoint or directory leaves
    /// the corresponding endpoints unavailable.
    pub fn load(checkpoint: Option<&Path>, artifact_dir: Option<&Path>, dev: &Device) -> Result<Self> {
        let mut a = Artifacts::default();
        if let Some(p) = checkpoint {
            a.model = Some(ScModel::load(p, dev)?.0);
        }
        let Some(dir) = artifact_dir else {
            return Ok(a);
        };
        if dir.join(STYLES_FILE).exists() {
            a.styles = StyleCatalog::load(dir)?.codes()?;
        }
        if dir.join(SEGMENTER_FILE).exists() {
            a.segmenter = Some(Segmenter::load(&dir.join(SEGMENTER_FILE), dev)?);
        }
        let g = dir.join(GLOBAL_INDEX);
        if g.join("manifest.json").exists() {
            a.global = Some(IndexBundle::load(&g, dev)?);
        }
        for c in Category::ALL {
            let d = dir.join(c.name());
            if d.join("manifest.json").exists() {
                a.components.insert(c, IndexBundle::load(&d, dev)?);
            }
        }
        Ok(a)
    }
}
