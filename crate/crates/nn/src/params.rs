//! Named parameter storage and the checkpoint file format.
//!
//! A checkpoint is an 8-byte little-endian header length, a JSON header, and
//! then every tensor's values as little-endian `f64` in header order:
//!
//! ```text
//! [u64 LE: header_len][header_len bytes of JSON][f64 LE ...]
//! ```
//!
//! The header lists layer names and shapes, carries the owner's config as an
//! opaque JSON value, and records the SHA-256 of that config's serialized form.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;
use crate::NnError;

pub const CHECKPOINT_FORMAT: &str = "chunklab-ckpt-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique; a duplicate panics since it
    /// indicates a model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn save(&self, path: &Path, config: &serde_json::Value) -> Result<(), NnError> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes, config)?;
        fs::write(path, bytes).map_err(|e| NnError::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W, config: &serde_json::Value) -> Result<(), NnError> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash: config_hash(config),
            config: config.clone(),
            tensors: self
                .iter()
                .map(|(_, name, t)| TensorEntry { name: name.to_string(), shape: [t.rows(), t.cols()] })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| NnError::Format(e.to_string()))?;
        let mut buf = Vec::with_capacity(8 + json.len() + 8 * self.num_scalars());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for t in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(|e| NnError::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader), NnError> {
        let mut f = fs::File::open(path).map_err(|e| NnError::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| NnError::io(path, e))?;
        Self::read_from(&bytes)
    }

    pub fn read_from(bytes: &[u8]) -> Result<(Self, CheckpointHeader), NnError> {
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| NnError::Format("checkpoint shorter than header length".into()))?;
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let json = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| NnError::Format("truncated checkpoint header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(json).map_err(|e| NnError::Format(format!("header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(NnError::Format(format!("unknown checkpoint format {}", header.format)));
        }
        if header.config_hash != config_hash(&header.config) {
            return Err(NnError::Format("config hash mismatch".into()));
        }
        let mut body = &bytes[8 + hlen..];
        let mut store = ParamStore::new();
        for entry in &header.tensors {
            let n = entry.shape[0] * entry.shape[1];
            if body.len() < 8 * n {
                return Err(NnError::Format(format!("truncated tensor {}", entry.name)));
            }
            let data = body[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            body = &body[8 * n..];
            store.add(entry.name.clone(), Tensor::from_vec(entry.shape[0], entry.shape[1], data)?);
        }
        if !body.is_empty() {
            return Err(NnError::Format(format!("{} trailing bytes", body.len())));
        }
        Ok((store, header))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub format: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Hex SHA-256 of the compact JSON serialization.
pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("json value serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip() {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::from_vec(2, 3, vec![1.0, -2.5, 3.0, 1e-300, f64::MIN_POSITIVE, 7.0]).unwrap());
        s.add("a.b", Tensor::row(&[0.125]));
        let cfg = serde_json::json!({"width": 8});
        let mut buf = Vec::new();
        s.write_to(&mut buf, &cfg).unwrap();
        let (back, header) = ParamStore::read_from(&buf).unwrap();
        assert_eq!(back, s);
        assert_eq!(header.config, cfg);
        assert_eq!(header.tensors[0].shape, [2, 3]);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(4, 4));
        let mut buf = Vec::new();
        s.write_to(&mut buf, &serde_json::json!({})).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ParamStore::read_from(&buf).is_err());
    }

    #[test]
    fn tampered_config_is_rejected() {
        let s = ParamStore::new();
        let mut buf = Vec::new();
        s.write_to(&mut buf, &serde_json::json!({"k": 1})).unwrap();
        let text = String::from_utf8_lossy(&buf).replace("\"k\":1", "\"k\":2");
        assert!(ParamStore::read_from(text.as_bytes()).is_err());
    }
}
