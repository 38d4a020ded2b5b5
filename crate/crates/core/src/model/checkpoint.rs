//! Single-file checkpoint archive.
//!
//! Layout: `b"SKSC"`, format version (u32 LE), manifest length (u64 LE), the
//! JSON manifest, then every tensor as raw little-endian f32 at the byte
//! offset recorded in the manifest (relative to the start of the data
//! section).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, GeneratorConfig};
use super::generator::Generator;
use super::sc::ScModel;
use crate::error::{Error, Result};
use crate::nn::layers::Parameterized;

pub const MAGIC: &[u8; 4] = b"SKSC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    #[serde(default)]
    pub encoder: Option<EncoderConfig>,
    /// Free-form metadata (training step, seeds, metrics).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes named tensors with a manifest.
pub fn write_archive(
    path: &Path,
    kind: &str,
    generator: Option<&GeneratorConfig>,
    encoder: Option<&EncoderConfig>,
    meta: serde_json::Value,
    params: &[(String, Var)],
) -> Result<()> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, v) in params {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: v.dims().to_vec(),
            dtype: "f32".into(),
            offset,
        });
        offset += v.elem_count() as u64 * 4;
    }
    let manifest = Manifest {
        kind: kind.into(),
        generator: generator.cloned(),
        encoder: encoder.cloned(),
        meta,
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, v) in params {
        let data = v.as_tensor().flatten_all()?.to_vec1::<f32>()?;
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for x in data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the manifest and every tensor's values.
pub fn read_archive(path: &Path) -> Result<(Manifest, BTreeMap<String, Vec<f32>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint archive", path.display())));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let manifest: Manifest =
        serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut out = BTreeMap::new();
    for t in &manifest.tensors {
        if t.dtype != "f32" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", t.name, t.dtype)));
        }
        let n: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + n * 4;
        if end > data.len() {
            return Err(Error::Checkpoint(format!("{}: data section truncated", t.name)));
        }
        let vals = data[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.insert(t.name.clone(), vals);
    }
    Ok((manifest, out))
}

/// Overwrites each parameter of `params` with the archived tensor of the same name.
pub fn assign(
    manifest: &Manifest,
    values: &BTreeMap<String, Vec<f32>>,
    params: &[(String, Var)],
) -> Result<()> {
    let shapes: BTreeMap<&str, &[usize]> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t.shape.as_slice()))
        .collect();
    for (name, var) in params {
        let shape = shapes
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if *shape != var.dims() {
            return Err(Error::Checkpoint(format!(
                "{name}: archived shape {shape:?}, model expects {:?}",
                var.dims()
            )));
        }
        let t = Tensor::from_vec(values[name].clone(), var.dims(), var.device())?;
        var.set(&t)?;
    }
    if params.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "archive holds {} tensors, model has {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    Ok(())
}

/// Archive of an arbitrary parameter set; `meta` carries the owner's config.
pub fn save_params(path: &Path, kind: &str, meta: serde_json::Value, params: &[(String, Var)]) -> Result<()> {
    write_archive(path, kind, None, None, meta, params)
}

/// Loads an archive written by [`save_params`] into `params`; returns its metadata.
pub fn load_params(path: &Path, kind: &str, params: &[(String, Var)]) -> Result<serde_json::Value> {
    let (m, values) = read_archive(path)?;
    if m.kind != kind {
        return Err(Error::Checkpoint(format!("archive holds a {}, expected a {kind}", m.kind)));
    }
    assign(&m, &values, params)?;
    Ok(m.meta)
}

/// Reads only the manifest.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Ok(read_archive(path)?.0)
}

impl Generator {
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        write_archive(path, "generator", Some(self.config()), None, meta, &self.named_params("generator"))
    }

    pub fn load(path: &Path, dev: &Device) -> Result<(Self, Manifest)> {
        let (m, values) = read_archive(path)?;
        let cfg = m.generator.as_ref().ok_or_else(|| Error::Checkpoint("archive has no generator".into()))?;
        let g = Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(0), dev)?;
        let own = g.named_params("generator");
        let subset: Vec<_> = m
            .tensors
            .iter()
            .filter(|t| t.name.starts_with("generator."))
            .cloned()
            .collect();
        let gm = Manifest {
            tensors: subset,
            ..m.clone()
        };
        assign(&gm, &values, &own)?;
        Ok((g, m))
    }
}

impl ScModel {
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let mut params = self.generator.named_params("generator");
        params.extend(self.encoder.named_params("encoder"));
        write_archive(
            path,
            "sc",
            Some(self.generator_config()),
            Some(self.encoder.config()),
            meta,
            &params,
        )
    }

    pub fn load(path: &Path, dev: &Device) -> Result<(Self, Manifest)> {
        let (m, values) = read_archive(path)?;
        let enc = m
            .encoder
            .clone()
            .ok_or_else(|| Error::Checkpoint("archive has no encoder".into()))?;
        let cfg = m.generator.as_ref().ok_or_else(|| Error::Checkpoint("archive has no generator".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Generator::new(cfg, &mut rng, dev)?;
        let model = ScModel::new(g, &enc, &mut rng)?;
        let mut params = model.generator.named_params("generator");
        params.extend(model.encoder.named_params("encoder"));
        assign(&m, &values, &params)?;
        Ok((model, m))
    }

    /// Loads and rejects archives whose configs differ from the expected ones.
    pub fn load_expecting(
        path: &Path,
        generator: &GeneratorConfig,
        encoder: &EncoderConfig,
        dev: &Device,
    ) -> Result<(Self, Manifest)> {
        let (m, _) = read_archive(path)?;
        if m.generator.as_ref() != Some(generator) {
            return Err(Error::Config("archived generator config differs from the expected one".into()));
        }
        if m.encoder.as_ref() != Some(encoder) {
            return Err(Error::Config("archived encoder config differs from the expected one".into()));
        }
        Self::load(path, dev)
    }
}
