//! Versioned tensor container used for encoder weights, classifier
//! checkpoints and trainer state.
//!
//! Layout: 8-byte magic `MSNCKPT\0`, `u32` format version, `u64` header
//! length, a JSON header, then the tensors' little-endian payloads in header
//! order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MSNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            TensorData::F32(v) => v.clone(),
            TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory contents of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, TensorData)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, metadata: serde_json::Value) -> Self {
        Self { kind: kind.into(), metadata, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, data: TensorData) {
        self.tensors.push((name.into(), data));
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix.`, with the prefix stripped.
    pub fn scoped(&self, prefix: &str) -> Vec<(String, &TensorData)> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|rest| (rest.to_string(), t)))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    dtype: match t {
                        TensorData::F32(_) => "f32".into(),
                        TensorData::F64(_) => "f64".into(),
                    },
                    len: t.len(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        // Write to a sibling file first so an interrupted save never leaves a torn checkpoint.
        let tmp = path.with_extension("partial");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&FORMAT_VERSION.to_le_bytes())?;
            w.write_all(&(header.len() as u64).to_le_bytes())?;
            w.write_all(&header)?;
            for (_, t) in &self.tensors {
                match t {
                    TensorData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                    TensorData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |reason: &str| Error::Checkpoint { path: path.to_path_buf(), reason: reason.to_string() };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let mut header = vec![0u8; u64::from_le_bytes(u64buf) as usize];
        r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let data = match entry.dtype.as_str() {
                "f32" => {
                    let mut bytes = vec![0u8; entry.len * 4];
                    r.read_exact(&mut bytes).map_err(|_| bad("truncated tensor data"))?;
                    TensorData::F32(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
                }
                "f64" => {
                    let mut bytes = vec![0u8; entry.len * 8];
                    r.read_exact(&mut bytes).map_err(|_| bad("truncated tensor data"))?;
                    TensorData::F64(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
                }
                other => return Err(bad(&format!("unknown dtype {other}"))),
            };
            tensors.push((entry.name, data));
        }
        Ok(Self { kind: header.kind, metadata: header.metadata, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut ck = Checkpoint::new("test", serde_json::json!({"direction": 90}));
        ck.push("a.weight", TensorData::F32(vec![1.5, -2.0, f32::MIN_POSITIVE]));
        ck.push("opt.m", TensorData::F64(vec![1e-300, 3.0]));
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert_eq!(ck.scoped("a").len(), 1);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint { .. })));
    }
}
