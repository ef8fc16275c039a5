//! Dataset on disk: one JSON manifest plus one binary voxel file per study.
//!
//! Voxel file layout (all little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `MLRV`                   |
//! | 4      | 4    | version (u32, currently 1)     |
//! | 8      | 12   | `S`, `H`, `W` (u32 each)       |
//! | 20     | 24   | spacing `x, y, z` (f64 each)   |
//! | 44     | 4·N  | voxels as f32, row-major S,H,W |

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Split, VolumeSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 4] = b"MLRV";
pub const VOLUME_VERSION: u32 = 1;
const HEADER_LEN: usize = 44;
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn encode_volume(v: &VolumeSample) -> Vec<u8> {
    let [s, h, w] = v.dims();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * v.voxels.len());
    buf.extend_from_slice(VOLUME_MAGIC);
    buf.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for d in [s, h, w] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for sp in v.spacing {
        buf.extend_from_slice(&sp.to_le_bytes());
    }
    for &x in v.voxels.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    buf
}

/// Decodes voxels and spacing; labels and identity come from the manifest.
pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<(Tensor, [f64; 3])> {
    let fail = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != VOLUME_MAGIC {
        return Err(fail("missing MLRV header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != VOLUME_VERSION {
        return Err(fail(format!("unsupported volume version {version}")));
    }
    let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let spacing = [f64_at(20), f64_at(28), f64_at(36)];
    let n: usize = dims.iter().product();
    if bytes.len() != HEADER_LEN + 4 * n {
        return Err(fail(format!("expected {} voxel bytes, found {}", 4 * n, bytes.len() - HEADER_LEN)));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((Tensor::new(&dims, data).map_err(|e| fail(e.to_string()))?, spacing))
}

pub fn write_volume(path: &Path, v: &VolumeSample) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_volume(v)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<(Tensor, [f64; 3])> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub labels: Vec<u8>,
    /// Relative to the dataset root.
    pub file: String,
    pub stream_id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceRow {
    pub class: String,
    pub positives: usize,
    pub fraction: f64,
    pub configured: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub classes: Vec<String>,
    pub prevalence: Vec<PrevalenceRow>,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }

    pub fn labels(&self, split: Split) -> Vec<Vec<u8>> {
        self.entries(split).map(|e| e.labels.clone()).collect()
    }
}

/// Loaded manifest plus its root directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        if manifest.version != VOLUME_VERSION {
            return Err(Error::Format {
                path,
                msg: format!("unsupported manifest version {}", manifest.version),
            });
        }
        Ok(Self { root, manifest })
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<VolumeSample> {
        let path = self.root.join(&entry.file);
        let (voxels, spacing) = read_volume(&path)?;
        VolumeSample::new(voxels, spacing, entry.labels.clone(), entry.id.clone(), entry.stream_id)
    }
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let v = VolumeSample::new(Tensor::full(&[2, 3, 4], -5.5), [0.5, 0.75, 4.0], vec![1], "x", 0).unwrap();
        let b = encode_volume(&v);
        assert_eq!(&b[..4], b"MLRV");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 4);
        assert_eq!(f64::from_le_bytes(b[28..36].try_into().unwrap()), 0.75);
        assert_eq!(b.len(), 44 + 4 * 24);
        let (t, sp) = decode_volume(&b, Path::new("mem")).unwrap();
        assert_eq!(t, v.voxels);
        assert_eq!(sp, v.spacing);
    }

    #[test]
    fn rejects_truncated_and_bad_version() {
        let v = VolumeSample::new(Tensor::zeros(&[1, 2, 2]), [1.0; 3], vec![], "x", 0).unwrap();
        let b = encode_volume(&v);
        assert!(decode_volume(&b[..b.len() - 1], Path::new("m")).is_err());
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(decode_volume(&bad, Path::new("m")).is_err());
        assert!(decode_volume(b"nope", Path::new("m")).is_err());
    }
}
