//! Versioned binary container: magic, JSON manifest, named f64 tensors.
//!
//! Layout: `b"SEMEDIT\0"`, u32 LE manifest length, manifest JSON, then every
//! tensor's values as f64 LE in manifest order. Used for generator
//! checkpoints and direction archives.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SEMEDIT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    format_version: u32,
    meta: serde_json::Value,
    tensors: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: ParamStore,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value, tensors: ParamStore) -> Self {
        Self { kind: kind.into(), meta, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            kind: self.kind.clone(),
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.tensors.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a semedit container".into()));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + len).ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", manifest.format_version)));
        }
        let mut pos = 12 + len;
        let mut tensors = ParamStore::new();
        for (name, shape) in manifest.tensors {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(pos..pos + 8 * n)
                .ok_or_else(|| Error::Format(format!("truncated tensor {name}")))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.insert(name, Tensor::new(shape, data)?);
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after tensors".into()));
        }
        Ok(Self { kind: manifest.kind, meta: manifest.meta, tensors })
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} container, found {}", self.kind)));
        }
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized bytes, hex.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON form (object keys sorted), so it does not
/// depend on field declaration order.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(sha256_hex(canonical_json(&v).as_bytes()))
}

pub fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}
