use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::unet::{Model, ModelConfig, ParamKind};
use crate::autodiff::Tensor;
use crate::bank::{BankRecord, RecordKind};
use crate::error::{Error, Result};

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub kind: RecordKind,
    pub shape: Vec<usize>,
    /// Byte offset of the record in the blob.
    pub offset: usize,
    /// Byte length of the record.
    pub len: usize,
}

/// JSON sidecar describing a model blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    pub layers: Vec<LayerEntry>,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn record_for(model: &Model, kind: ParamKind, t: &Tensor) -> BankRecord {
    let mut rec = BankRecord::dense(t.clone());
    let g = model.group();
    let kind = match kind {
        ParamKind::Dense => return rec,
        ParamKind::Lifting { .. } => RecordKind::Lifting,
        ParamKind::Group { .. } => RecordKind::Group,
    };
    rec.kind = kind;
    rec.n_rot = g.n_rot as u32;
    rec.n_scale = g.n_scale as u32;
    rec.mu = g.mu;
    rec.base_p = g.base_p as u32;
    rec.h = g.h;
    rec
}

/// Writes the parameter blob to `path` and the manifest next to it with a
/// `.json` extension.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut layers = Vec::new();
    let mut push = |name: String, rec: BankRecord| {
        let bytes = rec.encode();
        layers.push(LayerEntry {
            name,
            kind: rec.kind,
            shape: rec.data.shape().to_vec(),
            offset: blob.len(),
            len: bytes.len(),
        });
        blob.extend_from_slice(&bytes);
    };
    for p in &model.params {
        push(p.name.clone(), record_for(model, p.kind, &p.value));
    }
    for (name, stats) in model.running_names().iter().zip(&model.running) {
        let n = stats.mean.len();
        push(format!("{name}.running_mean"), BankRecord::dense(Tensor::new(vec![n], stats.mean.clone())?));
        push(format!("{name}.running_var"), BankRecord::dense(Tensor::new(vec![n], stats.var.clone())?));
    }
    let manifest = Manifest { version: MANIFEST_VERSION, config: model.config.clone(), layers };
    fs::write(path, &blob)?;
    fs::write(sidecar(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(sidecar(path))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Checkpoint(format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

/// Rebuilds a model from a blob written by [`save_model`].
pub fn load_model(path: &Path) -> Result<Model> {
    let manifest = load_manifest(path)?;
    let blob = fs::read(path)?;
    let mut model = Model::new(manifest.config.clone(), 0)?;
    let by_name: HashMap<&str, &LayerEntry> =
        manifest.layers.iter().map(|l| (l.name.as_str(), l)).collect();
    let fetch = |name: &str, shape: &[usize]| -> Result<BankRecord> {
        let e = by_name
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("layer `{name}` missing from checkpoint")))?;
        let bytes = blob
            .get(e.offset..e.offset + e.len)
            .ok_or_else(|| Error::Checkpoint(format!("layer `{name}` lies outside the blob")))?;
        let rec = BankRecord::decode(bytes)
            .map_err(|err| Error::Checkpoint(format!("layer `{name}`: {err}")))?;
        if rec.data.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "layer `{name}` has shape {:?}, model expects {shape:?}",
                rec.data.shape()
            )));
        }
        Ok(rec)
    };
    let group = model.group().clone();
    for p in model.params.iter_mut() {
        let rec = fetch(&p.name, p.value.shape())?;
        rec.check_group(&group)
            .map_err(|err| Error::Checkpoint(format!("layer `{}`: {err}", p.name)))?;
        p.value = rec.data;
    }
    let names = model.running_names().to_vec();
    for (name, stats) in names.iter().zip(model.running.iter_mut()) {
        let n = stats.mean.len();
        stats.mean = fetch(&format!("{name}.running_mean"), &[n])?.data.into_data();
        stats.var = fetch(&format!("{name}.running_var"), &[n])?.data.into_data();
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Variant;

    #[test]
    fn round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let cfg = ModelConfig { variant: Variant::FR, depth: 2, base_channels: 16, ..Default::default() };
        let mut model = Model::new(cfg, 3).unwrap();
        model.running[0].mean[0] = 0.125;
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.running, model.running);
        let x = Tensor::from_fn(&[1, 3, 8, 8], |i| (i % 7) as f64 / 7.0);
        assert_eq!(back.predict(&x).unwrap(), model.predict(&x).unwrap());
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let cfg = ModelConfig { variant: Variant::Vanilla, depth: 2, base_channels: 4, ..Default::default() };
        save_model(&Model::new(cfg, 0).unwrap(), &path).unwrap();
        let mut manifest = load_manifest(&path).unwrap();
        manifest.config.base_channels = 8;
        fs::write(sidecar(&path), serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = load_model(&path).unwrap_err().to_string();
        assert!(err.contains("enc0.0.conv.weight"), "{err}");
    }
}
