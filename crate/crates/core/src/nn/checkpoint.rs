//! Checkpoint file: 8-byte magic, little-endian `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::Digest;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const MAGIC: &[u8; 8] = b"FACCKPT1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A named tensor set plus free-form metadata (architecture config, seed, step count).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: store
                .iter()
                .map(|(n, m)| (n.to_string(), m.clone()))
                .collect(),
        }
    }

    pub fn empty() -> Self {
        Self {
            meta: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    /// SHA-256 over tensor names, shapes and bits, in stored order.
    pub fn content_hash(&self) -> String {
        let mut h = sha2::Sha256::new();
        for (name, m) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        super::params::hex_digest(h)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &self.tensors {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("missing checkpoint magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut pos = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n = t.rows * t.cols;
            let raw = bytes
                .get(pos..pos + n * 8)
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor {}", t.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos += n * 8;
            tensors.push((t.name, Matrix::from_vec(t.rows, t.cols, data)?));
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum TransferAction {
    Copied,
    SkippedShape,
    SkippedMissing,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct TransferEntry {
    pub name: String,
    pub action: TransferAction,
}

/// One entry per model parameter, in model order.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct TransferReport(pub Vec<TransferEntry>);

impl TransferReport {
    pub fn copied(&self) -> usize {
        self.count(TransferAction::Copied)
    }

    pub fn count(&self, action: TransferAction) -> usize {
        self.0.iter().filter(|e| e.action == action).count()
    }

    pub fn skipped(&self) -> Vec<&str> {
        self.0
            .iter()
            .filter(|e| e.action != TransferAction::Copied)
            .map(|e| e.name.as_str())
            .collect()
    }
}

/// Copies every checkpoint tensor whose name and shape match a model parameter.
pub fn transfer(store: &mut ParamStore, ckpt: &Checkpoint) -> TransferReport {
    let ids: Vec<_> = store.ids().collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let name = store.name(id).to_string();
        let action = match ckpt.get(&name) {
            None => TransferAction::SkippedMissing,
            Some(m) if m.shape() != store.value(id).shape() => TransferAction::SkippedShape,
            Some(m) => {
                *store.value_mut(id) = m.clone();
                TransferAction::Copied
            }
        };
        report.push(TransferEntry { name, action });
    }
    TransferReport(report)
}
