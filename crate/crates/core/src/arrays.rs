//! Little-endian named `f32` array container shared by corpus samples and
//! checkpoints.
//!
//! Each array is encoded as
//! `u32 name_len | name bytes | u32 ndim | u32 dims[ndim] | f32 data[prod(dims)]`.

use std::io::{Read, Write};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let a = Self { name: name.into(), shape, data };
        assert_eq!(a.shape.iter().product::<usize>(), a.data.len(), "array {} shape/data mismatch", a.name);
        a
    }
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn write_array(w: &mut impl Write, a: &NamedArray) -> std::io::Result<()> {
    write_u32(w, a.name.len() as u32)?;
    w.write_all(a.name.as_bytes())?;
    write_u32(w, a.shape.len() as u32)?;
    for d in &a.shape {
        write_u32(w, *d as u32)?;
    }
    let mut buf = Vec::with_capacity(a.data.len() * 4);
    for v in &a.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Upper bound on a single array, guarding against corrupt headers.
const MAX_ELEMENTS: usize = 1 << 28;

pub(crate) fn read_array(r: &mut impl Read) -> std::io::Result<NamedArray> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let name_len = read_u32(r)? as usize;
    if name_len > 4096 {
        return Err(bad("array name too long"));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| bad("array name is not utf-8"))?;
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(bad("too many dimensions"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let len = shape.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d)).ok_or_else(|| bad("shape overflow"))?;
    if len > MAX_ELEMENTS {
        return Err(bad("array too large"));
    }
    let mut buf = vec![0u8; len * 4];
    r.read_exact(&mut buf)?;
    let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(NamedArray { name, shape, data })
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> crate::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("part")
    ));
    std::fs::write(&tmp, bytes).map_err(|e| crate::Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| crate::Error::io(path, e))
}
