//! Binary weights container.
//!
//! Layout: the 8 magic bytes `DPEDW1\0\0`, a little-endian `u32` manifest
//! length, a UTF-8 JSON manifest, then the raw little-endian `f32` payloads
//! in manifest order. Tensor offsets are relative to the payload start.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DPEDW1\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub network_kind: String,
    /// Architecture hyper-parameters needed to rebuild the network.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub arch: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Container {
    pub network_kind: String,
    pub arch: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
    /// Hex SHA-256 of the file bytes.
    pub checksum: String,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn encode(kind: &str, arch: serde_json::Value, tensors: &[NamedTensor]) -> Vec<u8> {
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|t| {
            let byte_len = (t.data.len() * 4) as u64;
            let e = TensorEntry {
                name: t.name.clone(),
                dtype: "f32".into(),
                shape: t.shape.clone(),
                offset,
                byte_len,
            };
            offset += byte_len;
            e
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        network_kind: kind.to_string(),
        arch,
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write(path: impl AsRef<Path>, kind: &str, arch: serde_json::Value, tensors: &[NamedTensor]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(kind, arch, tensors);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(
        path,
        std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("truncated {what}")),
    )
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 8 {
        return Err(truncated(path, "header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Schema(format!("{}: bad magic bytes", path.display())));
    }
    if bytes.len() < 12 {
        return Err(truncated(path, "header"));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + mlen {
        return Err(truncated(path, "manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[12..12 + mlen])
        .map_err(|e| Error::Schema(format!("{}: manifest: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let payload = &bytes[12 + mlen..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(Error::Schema(format!("tensor {}: dtype {}", e.name, e.dtype)));
        }
        let count: usize = e.shape.iter().product();
        if e.byte_len != (count * 4) as u64 {
            return Err(Error::Schema(format!(
                "tensor {}: byte_len {} does not match shape {:?}",
                e.name, e.byte_len, e.shape
            )));
        }
        let (start, end) = (e.offset as usize, (e.offset + e.byte_len) as usize);
        if end > payload.len() {
            return Err(truncated(path, &format!("tensor {}", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data,
        });
    }
    Ok(Container {
        network_kind: manifest.network_kind,
        arch: manifest.arch,
        tensors,
        checksum: checksum(bytes),
    })
}

pub fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

/// Checks the kind and returns tensors keyed by the expected names/shapes.
pub fn expect_tensors(
    c: &Container,
    kind: &str,
    expected: &[(String, Vec<usize>)],
) -> Result<Vec<Vec<f32>>> {
    if c.network_kind != kind {
        return Err(Error::Schema(format!(
            "expected a {kind} container, found {}",
            c.network_kind
        )));
    }
    expected
        .iter()
        .map(|(name, shape)| {
            let t = c
                .tensor(name)
                .ok_or_else(|| Error::Schema(format!("missing tensor `{name}`")))?;
            if &t.shape != shape {
                return Err(Error::Schema(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape, shape
                )));
            }
            Ok(t.data.clone())
        })
        .collect()
}
