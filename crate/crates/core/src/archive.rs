//! `NTA1` named-tensor archive used for encoder weights and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"NTA1" | u64 header_len | header (UTF-8 JSON, header_len bytes) | payload
//! ```
//!
//! The header is `{"metadata": {string: string}, "tensors": [{"name",
//! "dtype": "f32", "shape", "offset"}]}` where `offset` is the byte offset of
//! the tensor inside the payload. Tensors are written in name order, packed
//! back to back as `f32`, so the payload length is `4 · Σ numel`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NTA1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, ArrayD<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: BTreeMap<String, String>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::InvalidInput(format!("malformed NTA1 archive: {}", msg.into()))
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a tensor; values are narrowed to `f32` as they will be on disk.
    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let value = value.mapv(|v| v as f32 as f64);
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            for v in t.as_standard_layout().iter() {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors: entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing NTA1 magic"));
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if header_len > body.len() {
            return Err(corrupt("header length exceeds file size"));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| corrupt(e.to_string()))?;
        let payload = &body[header_len..];

        let mut tensors = BTreeMap::new();
        let mut spans: Vec<(u64, u64)> = Vec::with_capacity(header.tensors.len());
        let mut total = 0u64;
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(corrupt(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            let len = numel as u64 * 4;
            let end = e.offset.checked_add(len).ok_or_else(|| corrupt("offset overflow"))?;
            if end > payload.len() as u64 {
                return Err(corrupt(format!("tensor `{}` runs past the payload", e.name)));
            }
            let raw = &payload[e.offset as usize..end as usize];
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), values)
                .map_err(|err| corrupt(err.to_string()))?;
            if tensors.insert(e.name.clone(), arr).is_some() {
                return Err(corrupt(format!("duplicate tensor name `{}`", e.name)));
            }
            spans.push((e.offset, end));
            total += len;
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(corrupt("tensor byte ranges overlap"));
        }
        if total != payload.len() as u64 {
            return Err(corrupt(format!(
                "payload holds {} bytes but tensors account for {total}",
                payload.len()
            )));
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::InvalidInput(m) => Error::io(path, m),
            other => other,
        })
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
