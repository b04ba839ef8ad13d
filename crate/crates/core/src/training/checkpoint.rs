//! Single-file checkpoints: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then every tensor as raw little-endian floats in
//! header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CONSEGCK";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub dtype: String,
    pub model: ModelConfig,
    /// Free-form run configuration recorded alongside the weights.
    pub run_config: serde_json::Value,
    pub vocabulary_digest: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, run_config: serde_json::Value, vocabulary_digest: &str) -> Result<()> {
    let tensors = model
        .store
        .entries()
        .iter()
        .map(|e| TensorEntry { name: e.name.clone(), rows: e.value.rows(), cols: e.value.cols(), frozen: e.frozen })
        .collect();
    let header = CheckpointHeader {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        dtype: T::DTYPE.to_string(),
        model: model.config.clone(),
        run_config,
        vocabulary_digest: vocabulary_digest.to_string(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::parse(path, e))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + model.store.num_scalars() * T::BYTES);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for e in model.store.entries() {
        bytes.extend_from_slice(&e.value.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn split(path: &Path, bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::parse(path, "not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::parse(path, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::parse(path, e))?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::parse(path, format!("unsupported schema_version {}", header.schema_version)));
    }
    Ok((header, end))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split(path, &bytes)?.0)
}

/// Rebuild the model from its recorded configuration and overwrite every
/// parameter. Payloads stored at the other precision are converted.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut off) = split(path, &bytes)?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::parse(path, format!("unknown dtype {other}"))),
    };
    let mut model = Model::<T>::new(header.model.clone())?;
    if model.store.len() != header.tensors.len() {
        return Err(Error::parse(path, format!("{} tensors stored, model has {}", header.tensors.len(), model.store.len())));
    }
    for (id, entry) in model.store.ids().collect::<Vec<_>>().into_iter().zip(&header.tensors) {
        let want = model.store.get(id).shape();
        if model.store.name(id) != entry.name || want != (entry.rows, entry.cols) {
            return Err(Error::parse(path, format!("tensor `{}` {:?} does not match `{}` {want:?}", entry.name, (entry.rows, entry.cols), model.store.name(id))));
        }
        let n = entry.rows * entry.cols;
        let chunk = bytes.get(off..off + n * width).ok_or_else(|| Error::parse(path, format!("payload of `{}` is truncated", entry.name)))?;
        let data: Vec<T> = chunk
            .chunks_exact(width)
            .map(|c| if width == 4 { T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64) } else { T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))) })
            .collect();
        model.store.set(id, Tensor::from_vec(entry.rows, entry.cols, data));
        model.store.set_frozen(id, entry.frozen);
        off += n * width;
    }
    if off != bytes.len() {
        return Err(Error::parse(path, "trailing bytes after the last tensor"));
    }
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut model = Model::<f64>::new(ModelConfig::tiny()).unwrap();
        let id = model.store.ids().nth(3).unwrap();
        let perturbed = model.store.get(id).map(|v| v * 1.5 + 0.25);
        model.store.set(id, perturbed);
        save_checkpoint(&p, &model, serde_json::json!({"seed": 3}), "abc").unwrap();
        let (back, header) = load_checkpoint::<f64>(&p).unwrap();
        assert_eq!(header.vocabulary_digest, "abc");
        assert_eq!(header.run_config["seed"], 3);
        for (a, b) in model.store.entries().iter().zip(back.store.entries()) {
            assert!(a.value.bit_eq(&b.value), "{}", a.name);
            assert_eq!(a.frozen, b.frozen);
        }
        let (as32, _) = load_checkpoint::<f32>(&p).unwrap();
        assert_eq!(as32.store.len(), model.store.len());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        fs::write(&p, b"nope").unwrap();
        assert!(matches!(load_checkpoint::<f64>(&p), Err(Error::Parse { .. })));
        let model = Model::<f64>::new(ModelConfig::tiny()).unwrap();
        save_checkpoint(&p, &model, serde_json::Value::Null, "").unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        assert!(load_checkpoint::<f64>(&p).is_err());
    }
}
