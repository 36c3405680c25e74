//! `SGCKPT01` checkpoints: 8 ASCII magic bytes, a little-endian `u32` header
//! length, a UTF-8 JSON header (format version, model spec, tensor table,
//! training metadata), then each tensor's values as little-endian `f32` at
//! the byte offset the table gives, relative to the end of the header.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub noise_sigma: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    /// Test accuracy after the last epoch (train accuracy if no test set).
    pub final_accuracy: f32,
    pub epoch_losses: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: serde_json::Value,
    tensors: Vec<TensorEntry>,
    metadata: TrainingMetadata,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    model: Model,
    pub metadata: TrainingMetadata,
}

impl Checkpoint {
    pub fn new(model: Model, metadata: TrainingMetadata) -> Self {
        Self { model, metadata }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, t) in self.model.params() {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.len();
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            spec: serde_json::to_value(self.model.spec())?,
            tensors,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.model.params().values() {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let what = "SGCKPT01";
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(what, "missing checkpoint magic"));
        }
        let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let json = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| Error::format(what, "truncated header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::format(what, format!("corrupt header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::format(
                what,
                format!(
                    "format version {} is not supported (expected {FORMAT_VERSION})",
                    header.format_version
                ),
            ));
        }
        let spec: ModelSpec = serde_json::from_value(header.spec.clone()).map_err(|e| {
            let arch = header.spec.get("architecture").cloned().unwrap_or_default();
            Error::format(what, format!("unknown or invalid architecture {arch}: {e}"))
        })?;
        let payload = &bytes[12 + header_len..];
        let mut params = BTreeMap::new();
        let mut expected_len = 0;
        for entry in header.tensors {
            let count: usize = entry.shape.iter().product();
            let span = payload
                .get(entry.offset..entry.offset + 4 * count)
                .ok_or_else(|| Error::format(what, format!("tensor `{}` is truncated", entry.name)))?;
            let data = span
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            expected_len = expected_len.max(entry.offset + 4 * count);
            params.insert(entry.name, Tensor::new(entry.shape, data)?);
        }
        if payload.len() != expected_len {
            return Err(Error::format(
                what,
                format!("payload has {} bytes, tensor table covers {expected_len}", payload.len()),
            ));
        }
        Ok(Self {
            model: Model::new(spec, params)?,
            metadata: header.metadata,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
