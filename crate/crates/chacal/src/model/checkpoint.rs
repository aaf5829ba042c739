//! Single-file checkpoint format.
//!
//! Layout: 8-byte little-endian header length, JSON header (model config,
//! dtype, tensor name -> offset/shape table), then the raw tensor data,
//! little-endian, in table order. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError};
use crate::numcore::{Real, Tensor};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: String,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    /// Byte offset into the data section.
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    Format(String),
    Model(ModelError),
}

impl std::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io: {e}"),
            CheckpointError::Format(m) => write!(f, "checkpoint format: {m}"),
            CheckpointError::Model(e) => write!(f, "checkpoint model: {e}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

pub fn save_model<R: Real>(model: &Model<R>, path: &Path) -> Result<(), CheckpointError> {
    let mut tensors = BTreeMap::new();
    let mut data: Vec<u8> = Vec::new();
    model.for_each_param(|name, t| {
        tensors.insert(
            name,
            TensorEntry { offset: data.len() as u64, shape: t.shape().to_vec() },
        );
        for &v in t.data() {
            v.write_le(&mut data);
        }
    });
    let header = Header {
        config: model.config().clone(),
        dtype: R::DTYPE.to_string(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::Format(format!("serialize header: {e}")))?;
    let mut out = File::create(path)?;
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.write_all(&header_json)?;
    out.write_all(&data)?;
    out.flush()?;
    Ok(())
}

pub fn load_model<R: Real>(path: &Path) -> Result<Model<R>, CheckpointError> {
    let mut file = File::open(path)?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| CheckpointError::Format(format!("parse header: {e}")))?;
    if header.dtype != R::DTYPE {
        return Err(CheckpointError::Format(format!(
            "dtype mismatch: file holds {}, requested {}",
            header.dtype,
            R::DTYPE
        )));
    }
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;

    let mut model = Model::init(header.config, 0).map_err(CheckpointError::Model)?;
    let mut missing = Vec::new();
    let width = R::BYTE_WIDTH;
    let mut names = Vec::new();
    model.for_each_param(|name, _| names.push(name));
    for (tensor, name) in model.params_mut().into_iter().zip(&names) {
        match header.tensors.get(name) {
            None => missing.push(name.clone()),
            Some(entry) => {
                let numel: usize = entry.shape.iter().product();
                let start = entry.offset as usize;
                let end = start + numel * width;
                if end > data.len() {
                    return Err(CheckpointError::Format(format!(
                        "tensor '{name}' runs past end of file"
                    )));
                }
                let values = data[start..end]
                    .chunks_exact(width)
                    .map(R::read_le)
                    .collect::<Vec<_>>();
                *tensor = Tensor::new(entry.shape.clone(), values)
                    .map_err(|e| CheckpointError::Format(format!("tensor '{name}': {e}")))?;
            }
        }
    }
    if !missing.is_empty() {
        return Err(CheckpointError::Format(format!(
            "missing tensors: {missing:?}"
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let cfg = ModelConfig::standard_then_chacal(2, 8, 2, 16, 11, 24, 0.9);
        let model: Model<f32> = Model::init(cfg, 42).unwrap();
        let dir = std::env::temp_dir().join("chacal_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save_model(&model, &path).unwrap();
        let loaded: Model<f32> = load_model(&path).unwrap();
        assert_eq!(loaded.config(), model.config());
        let mut originals = Vec::new();
        model.for_each_param(|_, t| originals.push(t.clone()));
        let mut idx = 0;
        loaded.for_each_param(|name, t| {
            let want = &originals[idx];
            assert_eq!(t.shape(), want.shape(), "{name}");
            for (a, b) in t.data().iter().zip(want.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
            idx += 1;
        });
    }

    #[test]
    fn file_is_byte_stable_for_same_model() {
        let cfg = ModelConfig::uniform(AttentionKind::Chacal, 1, 8, 2, 16, 7, 16, 0.9);
        let dir = std::env::temp_dir().join("chacal_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let (p1, p2) = (dir.join("a.ckpt"), dir.join("b.ckpt"));
        let m1: Model<f32> = Model::init(cfg.clone(), 7).unwrap();
        let m2: Model<f32> = Model::init(cfg, 7).unwrap();
        save_model(&m1, &p1).unwrap();
        save_model(&m2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let cfg = ModelConfig::uniform(AttentionKind::Standard, 1, 8, 2, 16, 7, 16, 0.0);
        let model: Model<f32> = Model::init(cfg, 1).unwrap();
        let dir = std::env::temp_dir().join("chacal_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f32.ckpt");
        save_model(&model, &path).unwrap();
        assert!(load_model::<f64>(&path).is_err());
    }
}
