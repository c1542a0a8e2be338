//! On-disk corpora of layered samples.
//!
//! A corpus directory holds one `sample_NNNNN.lsc` file per sample and a
//! `manifest.json`. Sample files start with a 16-byte header (`b"LSEPCORP"`,
//! `u32` format version, `u32` array count) followed by the named arrays
//! `background`, `reflection`, `observed` (`H x W x C`), `depth`, `mask`
//! (`H x W`, mask stored as 0/1) and `alpha` (`1`).
//!
//! Sample `i` is generated from seed `split_seed(corpus_seed, i)`.

use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arrays::{read_array, read_u32, write_array, write_atomic, write_u32, NamedArray};
use crate::error::{Error, Result};
use crate::image::{DepthMap, Image, Mask};
use crate::rng::split_seed;
use crate::scene::{synth_scene, LayeredSample, SceneParams};

pub const SAMPLE_MAGIC: &[u8; 8] = b"LSEPCORP";
pub const SAMPLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: u64,
    pub seed: u64,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub tool_version: String,
    pub format_version: u32,
    pub seed: u64,
    pub seed_rule: String,
    pub params: SceneParams,
    pub samples: Vec<SampleEntry>,
}

/// Serializes one sample in the corpus container format.
pub fn encode_sample(s: &LayeredSample) -> Vec<u8> {
    let (h, w, c) = s.background.shape();
    let arrays = [
        NamedArray::new("background", vec![h, w, c], s.background.data().to_vec()),
        NamedArray::new("reflection", vec![h, w, c], s.reflection.data().to_vec()),
        NamedArray::new("observed", vec![h, w, c], s.observed.data().to_vec()),
        NamedArray::new("depth", vec![h, w], s.depth.data().to_vec()),
        NamedArray::new("mask", vec![h, w], s.mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()),
        NamedArray::new("alpha", vec![1], vec![s.alpha]),
    ];
    encode_arrays(&arrays)
}

/// Container bytes holding `arrays`, in the corpus sample layout.
pub fn encode_arrays(arrays: &[NamedArray]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + arrays.iter().map(|a| 64 + a.data.len() * 4).sum::<usize>());
    out.extend_from_slice(SAMPLE_MAGIC);
    write_u32(&mut out, SAMPLE_VERSION).expect("vec write");
    write_u32(&mut out, arrays.len() as u32).expect("vec write");
    for a in arrays {
        write_array(&mut out, a).expect("vec write");
    }
    out
}

pub fn decode_arrays(bytes: &[u8], path: &Path) -> Result<Vec<NamedArray>> {
    let fmt = |detail: String| Error::Format { kind: "array container", path: path.to_path_buf(), detail };
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| fmt(e.to_string()))?;
    if &magic != SAMPLE_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let version = read_u32(&mut r).map_err(|e| fmt(e.to_string()))?;
    if version != SAMPLE_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r).map_err(|e| fmt(e.to_string()))?;
    let mut arrays = Vec::new();
    for _ in 0..count {
        arrays.push(read_array(&mut r).map_err(|e| fmt(e.to_string()))?);
    }
    if (r.position() as usize) != bytes.len() {
        return Err(fmt("trailing bytes".into()));
    }
    Ok(arrays)
}

/// A single image stored as the array `image` of shape `[H, W, C]`.
pub fn encode_image(img: &Image) -> Vec<u8> {
    let (h, w, c) = img.shape();
    encode_arrays(&[NamedArray::new("image", vec![h, w, c], img.data().to_vec())])
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Image> {
    let a = decode_arrays(bytes, path)?.into_iter().find(|a| a.name == "image");
    match a {
        Some(a) if a.shape.len() == 3 => Image::new(a.shape[0], a.shape[1], a.shape[2], a.data),
        _ => Err(Error::Format { kind: "raw image", path: path.to_path_buf(), detail: "no HxWxC array named image".into() }),
    }
}

pub fn decode_sample(bytes: &[u8], path: &Path) -> Result<LayeredSample> {
    let fmt = |detail: String| Error::Format { kind: "corpus sample", path: path.to_path_buf(), detail };
    let arrays = decode_arrays(bytes, path)?;
    let take = |name: &str| {
        arrays.iter().find(|a| a.name == name).cloned().ok_or_else(|| fmt(format!("missing array {name}")))
    };
    let image = |a: NamedArray| -> Result<Image> {
        if a.shape.len() != 3 {
            return Err(fmt(format!("{} is not HxWxC", a.name)));
        }
        Image::new(a.shape[0], a.shape[1], a.shape[2], a.data)
    };
    let background = image(take("background")?)?;
    let reflection = image(take("reflection")?)?;
    let observed = image(take("observed")?)?;
    let depth = take("depth")?;
    if depth.shape.len() != 2 {
        return Err(fmt("depth is not HxW".into()));
    }
    let depth = DepthMap::new(depth.shape[0], depth.shape[1], depth.data)?;
    let mask = take("mask")?;
    if mask.shape.len() != 2 {
        return Err(fmt("mask is not HxW".into()));
    }
    let mask = Mask::new(mask.shape[0], mask.shape[1], mask.data.iter().map(|&v| v > 0.5).collect())?;
    let alpha = take("alpha")?.data.first().copied().ok_or_else(|| fmt("empty alpha".into()))?;
    Ok(LayeredSample { background, reflection, alpha, observed, depth, mask })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sample_file(index: u64) -> String {
    format!("sample_{index:05}.lsc")
}

/// Generates `n` samples under `dir` and writes the manifest.
pub fn make_corpus(n: usize, seed: u64, params: &SceneParams, dir: &Path) -> Result<CorpusManifest> {
    if n == 0 {
        return Err(Error::Domain("corpus size must be at least 1".into()));
    }
    params.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let sample_seed = split_seed(seed, i);
        let bytes = encode_sample(&synth_scene(sample_seed, params)?);
        let file = sample_file(i);
        write_atomic(&dir.join(&file), &bytes)?;
        samples.push(SampleEntry { index: i, seed: sample_seed, file, sha256: sha256_hex(&bytes) });
    }
    let manifest = CorpusManifest {
        tool_version: crate::VERSION.to_string(),
        format_version: SAMPLE_VERSION,
        seed,
        seed_rule: "split_seed(corpus_seed, index) with SplitMix64 finalizer".into(),
        params: params.clone(),
        samples,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

/// In-memory corpus: sample `i` is `synth_scene(split_seed(seed, i))`.
pub fn generate(n: usize, seed: u64, params: &SceneParams) -> Result<Vec<LayeredSample>> {
    (0..n as u64).map(|i| synth_scene(split_seed(seed, i), params)).collect()
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format { kind: "corpus manifest", path, detail: e.to_string() })
}

/// Loads every sample, verifying checksums against the manifest.
pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<LayeredSample>)> {
    let manifest = read_manifest(dir)?;
    let samples = manifest
        .samples
        .iter()
        .map(|entry| load_entry(dir, entry))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

pub fn load_sample(dir: &Path, manifest: &CorpusManifest, index: usize) -> Result<LayeredSample> {
    let entry = manifest
        .samples
        .get(index)
        .ok_or_else(|| Error::Domain(format!("corpus has {} samples, index {index} requested", manifest.samples.len())))?;
    load_entry(dir, entry)
}

fn load_entry(dir: &Path, entry: &SampleEntry) -> Result<LayeredSample> {
    let path: PathBuf = dir.join(&entry.file);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(Error::Format { kind: "corpus sample", path, detail: "checksum mismatch".into() });
    }
    decode_sample(&bytes, &path)
}

/// Regenerates every sample from the manifest and compares bytes.
pub fn verify_regeneration(dir: &Path) -> Result<bool> {
    let manifest = read_manifest(dir)?;
    for entry in &manifest.samples {
        let bytes = encode_sample(&synth_scene(entry.seed, &manifest.params)?);
        let on_disk = std::fs::read(dir.join(&entry.file)).map_err(|e| Error::io(dir.join(&entry.file), e))?;
        if bytes != on_disk || split_seed(manifest.seed, entry.index) != entry.seed {
            return Ok(false);
        }
    }
    Ok(true)
}
