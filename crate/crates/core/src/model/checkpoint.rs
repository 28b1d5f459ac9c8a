//! Manifest + blob container. The manifest is JSON; the blob sits next to it
//! with the extension `.bin` and holds little-endian values in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BlockWeights, CalibrationSet, Model, ModelConfig, OutlierSpec};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U16,
    I32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U16 => 2,
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: u64,
}

pub(crate) fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

#[derive(Default)]
pub(crate) struct ContainerWriter {
    entries: Vec<TensorEntry>,
    blob: Vec<u8>,
}

impl ContainerWriter {
    fn push(&mut self, name: String, shape: &[usize], dtype: Dtype, bytes: Vec<u8>) {
        self.entries.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            dtype,
            byte_offset: self.blob.len() as u64,
            byte_length: bytes.len() as u64,
        });
        self.blob.extend(bytes);
    }

    pub fn f32(&mut self, name: impl Into<String>, t: &Tensor) {
        let bytes = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        self.push(name.into(), t.shape(), Dtype::F32, bytes);
    }

    pub fn f64(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name.into(), shape, Dtype::F64, bytes);
    }

    pub fn u16(&mut self, name: impl Into<String>, shape: &[usize], data: &[u16]) {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name.into(), shape, Dtype::U16, bytes);
    }

    pub fn i32(&mut self, name: impl Into<String>, shape: &[usize], data: &[i32]) {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name.into(), shape, Dtype::I32, bytes);
    }

    pub fn write(self, path: &Path, kind: &str, config: serde_json::Value, meta: serde_json::Value) -> Result<()> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            config,
            meta,
            tensors: self.entries,
            blob_bytes: self.blob.len() as u64,
        };
        let json = serde_json::to_vec_pretty(&manifest)?;
        let blob = blob_path(path);
        write_atomic(&blob, &self.blob)?;
        if let Err(e) = write_atomic(path, &json) {
            let _ = fs::remove_file(&blob);
            return Err(e);
        }
        Ok(())
    }
}

pub(crate) struct Container {
    path: PathBuf,
    pub manifest: Manifest,
    blob: Vec<u8>,
    index: BTreeMap<String, usize>,
}

impl Container {
    pub fn read(path: &Path, kind: &str) -> Result<Self> {
        let fail = |reason: String| Error::checkpoint(path, reason);
        let text = fs::read(path).map_err(|e| fail(format!("cannot read manifest: {e}")))?;
        let manifest: Manifest =
            serde_json::from_slice(&text).map_err(|e| fail(format!("malformed manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(fail(format!(
                "format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.kind != kind {
            return Err(fail(format!("holds a `{}`, expected a `{kind}`", manifest.kind)));
        }
        let blob = fs::read(blob_path(path)).map_err(|e| fail(format!("cannot read blob: {e}")))?;
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(fail(format!(
                "blob integrity: {} bytes on disk, manifest records {}",
                blob.len(),
                manifest.blob_bytes
            )));
        }
        let mut index = BTreeMap::new();
        for (i, e) in manifest.tensors.iter().enumerate() {
            let numel: usize = e.shape.iter().product();
            let end = e.byte_offset.checked_add(e.byte_length);
            if (numel * e.dtype.size()) as u64 != e.byte_length || end.is_none_or(|end| end > manifest.blob_bytes) {
                return Err(fail(format!("tensor `{}`: shape/byte range inconsistent", e.name)));
            }
            if index.insert(e.name.clone(), i).is_some() {
                return Err(fail(format!("tensor `{}` listed twice", e.name)));
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            manifest,
            blob,
            index,
        })
    }

    fn entry(&self, name: &str, dtype: Dtype) -> Result<(&TensorEntry, &[u8])> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::checkpoint(&self.path, format!("tensor `{name}` missing from manifest")))?;
        let e = &self.manifest.tensors[i];
        if e.dtype != dtype {
            return Err(Error::checkpoint(
                &self.path,
                format!("tensor `{name}` has dtype {:?}, expected {dtype:?}", e.dtype),
            ));
        }
        let start = e.byte_offset as usize;
        Ok((e, &self.blob[start..start + e.byte_length as usize]))
    }

    pub fn f32(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let (e, bytes) = self.entry(name, Dtype::F32)?;
        self.check_shape(e, shape)?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Tensor::new(&e.shape, data).map_err(|err| Error::checkpoint(&self.path, format!("tensor `{name}`: {err}")))
    }

    pub fn f64(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let (e, bytes) = self.entry(name, Dtype::F64)?;
        self.check_shape(e, shape)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::checkpoint(&self.path, format!("tensor `{name}` has non-finite values")));
        }
        Ok(data)
    }

    pub fn u16(&self, name: &str, shape: &[usize]) -> Result<Vec<u16>> {
        let (e, bytes) = self.entry(name, Dtype::U16)?;
        self.check_shape(e, shape)?;
        Ok(bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
            .collect())
    }

    pub fn i32(&self, name: &str, shape: &[usize]) -> Result<Vec<i32>> {
        let (e, bytes) = self.entry(name, Dtype::I32)?;
        self.check_shape(e, shape)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn check_shape(&self, e: &TensorEntry, shape: &[usize]) -> Result<()> {
        if e.shape != shape {
            return Err(Error::checkpoint(
                &self.path,
                format!("tensor `{}` has shape {:?}, expected {shape:?}", e.name, e.shape),
            ));
        }
        Ok(())
    }

    /// Fails naming the first tensor present in the manifest but never read.
    pub fn expect_exactly(&self, names: &[String]) -> Result<()> {
        for n in names {
            if !self.index.contains_key(n) {
                return Err(Error::checkpoint(&self.path, format!("tensor `{n}` missing from manifest")));
            }
        }
        if self.index.len() != names.len() {
            let extra = self
                .index
                .keys()
                .find(|k| !names.contains(k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::checkpoint(
                &self.path,
                format!(
                    "manifest lists {} tensors, expected {}; unexpected tensor `{extra}`",
                    self.index.len(),
                    names.len()
                ),
            ));
        }
        Ok(())
    }

    pub fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.manifest.config.clone())
            .map_err(|e| Error::checkpoint(&self.path, format!("bad config: {e}")))
    }
}

pub(crate) fn block_tensor_name(layer: usize, name: &str) -> String {
    format!("blocks.{layer}.{name}")
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    model.validate()?;
    let mut w = ContainerWriter::default();
    for (i, b) in model.blocks.iter().enumerate() {
        for (name, t) in b.named() {
            w.f32(block_tensor_name(i, name), t);
        }
    }
    w.write(path, "model", serde_json::to_value(&model.config)?, serde_json::Value::Null)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let c = Container::read(path, "model")?;
    let config: ModelConfig = c.config()?;
    config
        .validate()
        .map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let reference = BlockWeights::zeros(&config);
    let mut names = Vec::new();
    let mut blocks = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let mut read = |name: &str| -> Result<Tensor> {
            let full = block_tensor_name(i, name);
            let shape = reference
                .named()
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.shape().to_vec())
                .expect("known tensor");
            let t = c.f32(&full, &shape)?;
            names.push(full);
            Ok(t)
        };
        blocks.push(BlockWeights {
            ln1_gain: read("ln1_gain")?,
            ln1_bias: read("ln1_bias")?,
            w_q: read("w_q")?,
            w_k: read("w_k")?,
            w_v: read("w_v")?,
            w_o: read("w_o")?,
            ln2_gain: read("ln2_gain")?,
            ln2_bias: read("ln2_bias")?,
            w_gate: read("w_gate")?,
            w_up: read("w_up")?,
            w_down: read("w_down")?,
        });
    }
    c.expect_exactly(&names)?;
    Ok(Model { config, blocks })
}

#[derive(Serialize, Deserialize)]
struct CalibMeta {
    seed: u64,
    outliers: Option<OutlierSpec>,
}

#[derive(Serialize, Deserialize)]
struct CalibShape {
    n_samples: usize,
    seq_len: usize,
    d_model: usize,
}

pub fn save_calibration(set: &CalibrationSet, path: &Path) -> Result<()> {
    let first = set.samples.first().ok_or(Error::Empty("calibration set"))?;
    if set.samples.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::shape("save_calibration", "samples differ in shape"));
    }
    let mut w = ContainerWriter::default();
    for (i, s) in set.samples.iter().enumerate() {
        w.f32(format!("samples.{i}"), s);
    }
    let shape = CalibShape {
        n_samples: set.samples.len(),
        seq_len: first.rows(),
        d_model: first.cols(),
    };
    let meta = CalibMeta {
        seed: set.seed,
        outliers: set.outliers.clone(),
    };
    w.write(path, "calibration", serde_json::to_value(shape)?, serde_json::to_value(meta)?)
}

pub fn load_calibration(path: &Path) -> Result<CalibrationSet> {
    let c = Container::read(path, "calibration")?;
    let shape: CalibShape = c.config()?;
    let meta: CalibMeta = serde_json::from_value(c.manifest.meta.clone())
        .map_err(|e| Error::checkpoint(path, format!("bad metadata: {e}")))?;
    if shape.n_samples == 0 {
        return Err(Error::checkpoint(path, "calibration set is empty"));
    }
    let names: Vec<String> = (0..shape.n_samples).map(|i| format!("samples.{i}")).collect();
    let samples = names
        .iter()
        .map(|n| c.f32(n, &[shape.seq_len, shape.d_model]))
        .collect::<Result<Vec<_>>>()?;
    c.expect_exactly(&names)?;
    Ok(CalibrationSet {
        samples,
        seed: meta.seed,
        outliers: meta.outliers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_calibration, gen_synthetic_model};

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            n_layers: 2,
            seq_len: 6,
        }
    }

    #[test]
    fn model_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let m = gen_synthetic_model(&small(), 4, &OutlierSpec::default_for(8)).unwrap();
        save_checkpoint(&m, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), m);
        let first = fs::read(&p).unwrap();
        save_checkpoint(&load_checkpoint(&p).unwrap(), &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }

    #[test]
    fn calibration_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let mut c = gen_calibration(&small(), 2, 3).unwrap();
        c.outliers = Some(OutlierSpec::default_for(8));
        save_calibration(&c, &p).unwrap();
        assert_eq!(load_calibration(&p).unwrap(), c);
        assert!(load_checkpoint(&p).is_err());
    }

    #[test]
    fn truncated_blob_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_checkpoint(&gen_synthetic_model(&small(), 1, &OutlierSpec::none()).unwrap(), &p).unwrap();
        let blob = blob_path(&p);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_checkpoint(&p).unwrap_err().to_string();
        assert!(err.contains("integrity"), "{err}");
    }

    #[test]
    fn missing_tensor_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_checkpoint(&gen_synthetic_model(&small(), 1, &OutlierSpec::none()).unwrap(), &p).unwrap();
        let mut manifest: Manifest = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        manifest.tensors.retain(|t| t.name != "blocks.1.w_up");
        fs::write(&p, serde_json::to_vec(&manifest).unwrap()).unwrap();
        let err = load_checkpoint(&p).unwrap_err().to_string();
        assert!(err.contains("blocks.1.w_up"), "{err}");
    }

    #[test]
    fn version_and_missing_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint { .. })));
        save_checkpoint(&gen_synthetic_model(&small(), 1, &OutlierSpec::none()).unwrap(), &p).unwrap();
        let mut manifest: Manifest = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        manifest.format_version = 99;
        fs::write(&p, serde_json::to_vec(&manifest).unwrap()).unwrap();
        assert!(load_checkpoint(&p).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_checkpoint(&gen_synthetic_model(&small(), 1, &OutlierSpec::none()).unwrap(), &p).unwrap();
        let blob = blob_path(&p);
        let mut bytes = fs::read(&blob).unwrap();
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&blob, bytes).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
