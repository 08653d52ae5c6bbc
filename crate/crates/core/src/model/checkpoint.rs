//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian u64 manifest length, UTF-8 JSON
//! manifest, then every array's values as little-endian f32 in manifest
//! order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SegmentationModelSpec;
use crate::nn::ParamKind;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SALTCKP1";

/// Where a parameter set sits in the experiment.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamTags {
    pub round: Option<usize>,
    pub fold: Option<usize>,
    pub snapshot: Option<usize>,
    pub epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: SegmentationModelSpec,
    spec_hash: String,
    tags: ParamTags,
    arrays: Vec<ArrayEntry>,
}

/// Every named weight and buffer of a model, with the spec that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub spec: SegmentationModelSpec,
    pub spec_hash: String,
    pub tags: ParamTags,
    pub arrays: Vec<NamedArray>,
}

impl ModelParameters {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            spec: self.spec.clone(),
            spec_hash: self.spec_hash.clone(),
            tags: self.tags.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| ArrayEntry {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    kind: a.kind,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let total: usize = self.arrays.iter().map(|a| a.data.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, mut r) = split_manifest(bytes)?;
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in manifest.arrays {
            let n: usize = e.shape.iter().product();
            if r.len() < 4 * n {
                return Err(Error::Format(format!("checkpoint data for `{}` truncated", e.name)));
            }
            let data = r[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            r = &r[4 * n..];
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                kind: e.kind,
                data,
            });
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint data".into()));
        }
        Ok(Self {
            spec: manifest.spec,
            spec_hash: manifest.spec_hash,
            tags: manifest.tags,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Spec and tags of a checkpoint file without reading its arrays.
    pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut head = [0u8; 16];
        f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
        let len = u64::from_le_bytes(head[8..].try_into().expect("eight bytes")) as usize;
        let mut bytes = head.to_vec();
        bytes.resize(16 + len, 0);
        f.read_exact(&mut bytes[16..]).map_err(|e| Error::io(path, e))?;
        let (m, _) = split_manifest(&bytes)?;
        Ok(CheckpointHeader {
            spec: m.spec,
            spec_hash: m.spec_hash,
            tags: m.tags,
        })
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.arrays
            .iter()
            .filter(|a| a.kind == ParamKind::Trainable)
            .map(|a| a.data.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.data.iter().all(|v| v.is_finite()))
    }
}

/// The manifest part of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub spec: SegmentationModelSpec,
    pub spec_hash: String,
    pub tags: ParamTags,
}

fn split_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Format("checkpoint truncated".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| Error::Format("checkpoint truncated".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    if r.len() < len {
        return Err(Error::Format("checkpoint manifest truncated".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&r[..len]).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    if manifest.spec.spec_hash() != manifest.spec_hash {
        return Err(Error::Compatibility("checkpoint spec hash does not match its spec".into()));
    }
    Ok((manifest, &r[len..]))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
