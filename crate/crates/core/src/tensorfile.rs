//! Binary tensor container: a JSON header followed by little-endian f64 payloads and a
//! trailing SHA-256 of everything before it.
//!
//! ```text
//! b"STTF" | u32 version | u64 header_len | header JSON | f64 data ... | sha256 (32 bytes)
//! ```

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::util::write_atomic;

const MAGIC: &[u8; 4] = b"STTF";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt tensor file: {0}")]
    Corrupt(String),
    #[error("tensor {0:?} missing from artifact")]
    Missing(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded artifact: free-form metadata plus named tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl TensorFile {
    pub fn new(meta: serde_json::Value) -> Self {
        TensorFile {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push<D: ndarray::Dimension>(&mut self, name: impl Into<String>, array: &ndarray::Array<f64, D>) {
        self.tensors.push((name.into(), array.clone().into_dyn()));
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>, TensorFileError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| TensorFileError::Missing(name.to_owned()))
    }

    pub fn get2(&self, name: &str) -> Result<ndarray::Array2<f64>, TensorFileError> {
        self.get(name)?
            .clone()
            .into_dimensionality()
            .map_err(|_| TensorFileError::Corrupt(format!("{name} is not a matrix")))
    }

    pub fn get1(&self, name: &str) -> Result<ndarray::Array1<f64>, TensorFileError> {
        self.get(name)?
            .clone()
            .into_dimensionality()
            .map_err(|_| TensorFileError::Corrupt(format!("{name} is not a vector")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, array) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: array.shape().to_vec(),
                offset: payload.len(),
            });
            for v in array.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + payload.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorFileError> {
        let corrupt = |m: &str| TensorFileError::Corrupt(m.to_owned());
        if bytes.len() < 16 + 32 {
            return Err(corrupt("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified)"));
        }
        if &body[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(TensorFileError::Corrupt(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&body[16..header_end])
            .map_err(|e| TensorFileError::Corrupt(format!("header: {e}")))?;
        let payload = &body[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = entry.offset + 8 * n;
            let raw = payload
                .get(entry.offset..end)
                .ok_or_else(|| TensorFileError::Corrupt(format!("tensor {} out of bounds", entry.name)))?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| TensorFileError::Corrupt(format!("tensor {}: {e}", entry.name)))?;
            tensors.push((entry.name, array));
        }
        Ok(TensorFile {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorFileError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| TensorFileError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TensorFileError> {
        let bytes = fs::read(path).map_err(|source| TensorFileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
