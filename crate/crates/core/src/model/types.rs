use std::io::{Read, Write};

use candle_core::{Device, Tensor};

use crate::error::{dim_err, Error, Result};

/// Per-layer style vectors (L × D), split into high-level rows that drive
/// layers up to the replacement resolution and low-level rows after it.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleCode {
    rows: usize,
    dim: usize,
    split_index: usize,
    values: Vec<f32>,
}

impl StyleCode {
    pub fn new(values: Vec<f32>, rows: usize, dim: usize, split_index: usize) -> Result<Self> {
        if values.len() != rows * dim {
            return Err(dim_err(format!(
                "style code has {} values, expected {rows}×{dim}",
                values.len()
            )));
        }
        if split_index > rows {
            return Err(dim_err(format!("split {split_index} exceeds {rows} rows")));
        }
        Ok(Self {
            rows,
            dim,
            split_index,
            values,
        })
    }

    pub fn zeros(rows: usize, dim: usize, split_index: usize) -> Self {
        Self {
            rows,
            dim,
            split_index,
            values: vec![0.0; rows * dim],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn high(&self) -> &[f32] {
        &self.values[..self.split_index * self.dim]
    }

    pub fn low(&self) -> &[f32] {
        &self.values[self.split_index * self.dim..]
    }

    pub fn low_rows(&self) -> usize {
        self.rows - self.split_index
    }

    /// High rows of `self` followed by the low rows of `other`.
    pub fn mixed_with(&self, other: &StyleCode) -> Result<StyleCode> {
        if other.rows != self.rows || other.dim != self.dim || other.split_index != self.split_index {
            return Err(dim_err("cannot mix style codes of different layouts"));
        }
        let mut values = self.high().to_vec();
        values.extend_from_slice(other.low());
        StyleCode::new(values, self.rows, self.dim, self.split_index)
    }

    pub fn with_split(mut self, split_index: usize) -> Result<Self> {
        if split_index > self.rows {
            return Err(dim_err("split exceeds row count"));
        }
        self.split_index = split_index;
        Ok(self)
    }

    /// Stacks codes into a (B, L, D) tensor.
    pub fn stack(codes: &[&StyleCode], dev: &Device) -> Result<Tensor> {
        let first = codes.first().ok_or_else(|| dim_err("empty style batch"))?;
        let mut data = Vec::with_capacity(codes.len() * first.values.len());
        for c in codes {
            if c.rows != first.rows || c.dim != first.dim {
                return Err(dim_err("style batch with mixed shapes"));
            }
            data.extend_from_slice(&c.values);
        }
        Ok(Tensor::from_vec(data, (codes.len(), first.rows, first.dim), dev)?)
    }

    /// Stacks the low rows of each code into (B, L_low, D).
    pub fn stack_low(codes: &[&StyleCode], dev: &Device) -> Result<Tensor> {
        let first = codes.first().ok_or_else(|| dim_err("empty style batch"))?;
        let mut data = Vec::new();
        for c in codes {
            if c.low_rows() != first.low_rows() || c.dim != first.dim {
                return Err(dim_err("style batch with mixed low-row shapes"));
            }
            data.extend_from_slice(c.low());
        }
        Ok(Tensor::from_vec(data, (codes.len(), first.low_rows(), first.dim), dev)?)
    }

    /// Raw little-endian f32 with an 8-byte header of (L, D) as u32.
    pub fn write_raw<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_raw<R: Read>(mut r: R, split_index: usize) -> Result<Self> {
        let mut hdr = [0u8; 8];
        r.read_exact(&mut hdr)?;
        let rows = u32::from_le_bytes(hdr[0..4].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(hdr[4..8].try_into().unwrap()) as usize;
        let mut buf = vec![0u8; rows * dim * 4];
        r.read_exact(&mut buf)?;
        let values = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        StyleCode::new(values, rows, dim, split_index)
    }
}

/// Generator state at the replacement resolution (batched).
#[derive(Debug, Clone)]
pub struct IntermediatePair {
    /// (B, C_r, r, r)
    pub feature: Tensor,
    /// (B, 3, r, r)
    pub image: Tensor,
}

impl IntermediatePair {
    pub fn check(&self, channels: usize, res: usize, rgb: usize) -> Result<usize> {
        let (b, c, h, w) = self.feature.dims4()?;
        let (bi, ci, hi, wi) = self.image.dims4()?;
        if c != channels || h != res || w != res {
            return Err(dim_err(format!(
                "feature is {c}×{h}×{w}, expected {channels}×{res}×{res}"
            )));
        }
        if bi != b || ci != rgb || hi != res || wi != res {
            return Err(dim_err(format!(
                "image is {bi}×{ci}×{hi}×{wi}, expected {b}×{rgb}×{res}×{res}"
            )));
        }
        Ok(b)
    }

    pub fn detach(&self) -> Self {
        Self {
            feature: self.feature.detach(),
            image: self.image.detach(),
        }
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Ok(Self {
            feature: (&self.feature * k)?,
            image: (&self.image * k)?,
        })
    }
}

/// Per-resolution block outputs recorded during synthesis, keyed by log2 of
/// the resolution.
#[derive(Debug, Clone, Default)]
pub struct BlockTrace {
    pub features: Vec<(u32, Tensor)>,
    pub pair: Option<IntermediatePair>,
}

impl BlockTrace {
    pub fn level(&self, level: u32) -> Option<&Tensor> {
        self.features.iter().find(|(l, _)| *l == level).map(|(_, t)| t)
    }

    pub fn levels(&self) -> Vec<u32> {
        self.features.iter().map(|(l, _)| *l).collect()
    }
}

/// A sketch raster and a semantic label raster of the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPair {
    pub res: usize,
    /// Row-major, 1 = stroke.
    pub sketch: Vec<f32>,
    /// Row-major label ids.
    pub labels: Vec<u8>,
}

impl ConditionPair {
    pub fn new(res: usize, sketch: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if sketch.len() != res * res || labels.len() != res * res {
            return Err(dim_err(format!("condition rasters must be {res}×{res}")));
        }
        Ok(Self { res, sketch, labels })
    }

    pub fn blank(res: usize) -> Self {
        Self {
            res,
            sketch: vec![0.0; res * res],
            labels: vec![0; res * res],
        }
    }

    pub fn validate(&self, res: usize, classes: usize) -> Result<()> {
        if self.res != res {
            return Err(dim_err(format!(
                "condition is {}², encoder expects {res}²",
                self.res
            )));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Data(format!("label {l} outside the {classes}-class schema")));
        }
        if self.sketch.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("sketch contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Batched encoder input: sketch (B,1,H,W) and one-hot labels (B,C,H,W).
#[derive(Debug, Clone)]
pub struct ConditionBatch {
    pub sketch: Tensor,
    pub labels: Tensor,
}

impl ConditionBatch {
    pub fn from_pairs(pairs: &[&ConditionPair], classes: usize, dev: &Device) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| dim_err("empty condition batch"))?;
        let res = first.res;
        let hw = res * res;
        let mut sketch = Vec::with_capacity(pairs.len() * hw);
        let mut onehot = vec![0f32; pairs.len() * classes * hw];
        for (b, p) in pairs.iter().enumerate() {
            p.validate(res, classes)?;
            sketch.extend_from_slice(&p.sketch);
            for (i, &l) in p.labels.iter().enumerate() {
                onehot[(b * classes + l as usize) * hw + i] = 1.0;
            }
        }
        Ok(Self {
            sketch: Tensor::from_vec(sketch, (pairs.len(), 1, res, res), dev)?,
            labels: Tensor::from_vec(onehot, (pairs.len(), classes, res, res), dev)?,
        })
    }
}
