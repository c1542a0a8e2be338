//! Model checkpoints: a fixed header followed by JSON metadata and named
//! little-endian `f32` arrays.
//!
//! ```text
//! b"LSEPCKPT" | u32 format_version | u64 arch_hash | u64 step | u64 seed
//! | u32 meta_len | meta (JSON, utf-8) | u32 array_count | arrays...
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use serde_json::Value;

use crate::arrays::{read_array, read_u32, read_u64, write_array, write_atomic, write_u32, write_u64, NamedArray};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ParamLayout};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSEPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch_hash: u64,
    pub step: u64,
    pub seed: u64,
    pub meta: Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        // Writes into a Vec cannot fail.
        write_u32(&mut out, CHECKPOINT_VERSION).unwrap();
        write_u64(&mut out, self.arch_hash).unwrap();
        write_u64(&mut out, self.step).unwrap();
        write_u64(&mut out, self.seed).unwrap();
        write_u32(&mut out, meta.len() as u32).unwrap();
        out.extend_from_slice(&meta);
        write_u32(&mut out, self.arrays.len() as u32).unwrap();
        for a in &self.arrays {
            write_array(&mut out, a).unwrap();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |d: String| Error::Format { kind: "checkpoint", path: path.to_path_buf(), detail: d };
        let io = |e: std::io::Error| fmt(e.to_string());
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let version = read_u32(&mut r).map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let arch_hash = read_u64(&mut r).map_err(io)?;
        let step = read_u64(&mut r).map_err(io)?;
        let seed = read_u64(&mut r).map_err(io)?;
        let meta_len = read_u32(&mut r).map_err(io)? as usize;
        if meta_len > bytes.len() {
            return Err(fmt("metadata length exceeds file".into()));
        }
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(io)?;
        let meta = serde_json::from_slice(&meta).map_err(|e| fmt(e.to_string()))?;
        let count = read_u32(&mut r).map_err(io)?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            arrays.push(read_array(&mut r).map_err(io)?);
        }
        Ok(Self { arch_hash, step, seed, meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedArray> {
        self.array(name)
            .ok_or_else(|| Error::Format { kind: "checkpoint", path: "<memory>".into(), detail: format!("missing array {name}") })
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Value::as_str)
    }
}

/// One named array per parameter tensor, prefixed with `prefix`.
pub fn params_to_arrays(prefix: &str, layout: &ParamLayout, values: &[f32]) -> Vec<NamedArray> {
    layout
        .entries()
        .iter()
        .map(|e| NamedArray::new(format!("{prefix}{}", e.name), e.shape.clone(), values[e.offset..e.offset + e.len()].to_vec()))
        .collect()
}

pub fn params_from_arrays(prefix: &str, layout: &ParamLayout, ckpt: &Checkpoint) -> Result<Vec<f32>> {
    let mut out = vec![0.0f32; layout.len()];
    for e in layout.entries() {
        let a = ckpt.require(&format!("{prefix}{}", e.name))?;
        if a.shape != e.shape {
            return Err(Error::Dimension(format!("parameter {} has shape {:?}, expected {:?}", e.name, a.shape, e.shape)));
        }
        out[e.offset..e.offset + e.len()].copy_from_slice(&a.data);
    }
    Ok(out)
}

/// Adam moments as two flat arrays.
pub fn adam_to_arrays(adam: &Adam<f32>) -> Vec<NamedArray> {
    vec![
        NamedArray::new("adam.m", vec![adam.m.len()], adam.m.clone()),
        NamedArray::new("adam.v", vec![adam.v.len()], adam.v.clone()),
    ]
}

pub fn adam_from_arrays(ckpt: &Checkpoint, config: AdamConfig, len: usize) -> Result<Adam<f32>> {
    let m = ckpt.require("adam.m")?.data.clone();
    let v = ckpt.require("adam.v")?.data.clone();
    if m.len() != len || v.len() != len {
        return Err(Error::Dimension(format!("optimizer state has {} entries, expected {len}", m.len())));
    }
    Ok(Adam::from_state(config, m, v, ckpt.step))
}

/// Hex digest of a parameter vector, used to compare runs.
pub fn params_checksum(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    crate::corpus::sha256_hex(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let ck = Checkpoint {
            arch_hash: 0xdead_beef,
            step: 17,
            seed: 42,
            meta: serde_json::json!({"kind": "test", "provenance": "learned"}),
            arrays: vec![NamedArray::new("w", vec![2, 2], vec![1.0, -2.0, 3.5, 0.0])],
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta_str("provenance"), Some("learned"));
    }

    #[test]
    fn rejects_truncation() {
        let ck = Checkpoint { arch_hash: 1, step: 0, seed: 0, meta: Value::Null, arrays: vec![NamedArray::new("a", vec![3], vec![1.0; 3])] };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2], Path::new("mem")).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT", Path::new("mem")).is_err());
    }
}
