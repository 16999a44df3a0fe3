//! Binary checkpoints: 8-byte magic, little-endian `u32` manifest length,
//! JSON manifest, then every parameter as little-endian `f32` in manifest
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMPANCK1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ModelConfig,
    params: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload.
    offset: usize,
}

fn bad(message: impl Into<String>) -> Error {
    Error::Checkpoint(message.into())
}

impl Model {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut params = Vec::new();
        let mut offset = 0;
        for (_, p) in self.store.iter() {
            params.push(Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            });
            offset += p.value.len() * 4;
        }
        let manifest = Manifest {
            config: self.config.clone(),
            params,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| bad(e.to_string()))?;
        let len = u32::try_from(json.len()).map_err(|_| bad("manifest too large"))?;
        let mut out = Vec::with_capacity(12 + json.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic; not a model checkpoint"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(12..12 + len)
            .ok_or_else(|| bad(format!("manifest of {len} bytes exceeds the file")))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
        let payload = &bytes[12 + len..];

        let mut model = Model::new(manifest.config, 0)?;
        let expected: usize = manifest
            .params
            .iter()
            .map(|e| e.shape.iter().product::<usize>() * 4)
            .sum();
        if payload.len() != expected {
            return Err(bad(format!(
                "payload length {} bytes, manifest describes {}",
                payload.len(),
                expected
            )));
        }
        if manifest.params.len() != model.store.len() {
            return Err(bad(format!(
                "manifest lists {} parameters, the configuration defines {}",
                manifest.params.len(),
                model.store.len()
            )));
        }
        for entry in &manifest.params {
            let id = model
                .store
                .id(&entry.name)
                .ok_or_else(|| bad(format!("unknown parameter {:?}", entry.name)))?;
            if entry.dtype != "f32" {
                return Err(bad(format!("parameter {:?} has dtype {}", entry.name, entry.dtype)));
            }
            let param = model.store.get_mut(id);
            if param.value.shape() != entry.shape.as_slice() {
                return Err(bad(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    entry.name,
                    entry.shape,
                    param.value.shape()
                )));
            }
            let n = param.value.len() * 4;
            let raw = payload
                .get(entry.offset..entry.offset + n)
                .ok_or_else(|| bad(format!("parameter {:?} lies outside the payload", entry.name)))?;
            for (dst, chunk) in param.value.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::doc_model::write_atomic(path, &self.to_checkpoint_bytes()?)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_checkpoint_bytes(&bytes)
    }
}
