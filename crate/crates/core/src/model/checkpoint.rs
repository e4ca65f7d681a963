//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `LSCKPT01`, a little-endian `u64` header
//! length, the header as compact JSON (model config, metadata and a
//! manifest of `name`/`shape`/`offset`), then every parameter as
//! little-endian `f64` values. Offsets are byte offsets from the start of
//! the blob section.

use std::collections::BTreeMap;
use std::path::Path;

use linesight_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ModelParameters;

const MAGIC: &[u8; 8] = b"LSCKPT01";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    /// 0 for a fresh initialisation, otherwise the training stage that wrote it.
    pub stage: u8,
    pub step: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParameters,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = Vec::new();
        let mut blob = Vec::new();
        for (name, t) in self.params.iter() {
            manifest.push(ManifestEntry {
                name: name.to_string(),
                shape: t.dims().to_vec(),
                offset: blob.len() as u64,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
            manifest,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing LSCKPT01 magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..header_end]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        header.config.validate()?;
        let blob = &bytes[header_end..];
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        for entry in &header.manifest {
            if entry.offset != expected_offset {
                return Err(Error::Checkpoint(format!("{}: offset out of sequence", entry.name)));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let raw = blob
                .get(start..start + n * 8)
                .ok_or_else(|| Error::Checkpoint(format!("{}: blob truncated", entry.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(entry.name.clone(), Tensor::new(&entry.shape, data)?);
            expected_offset += (n * 8) as u64;
        }
        if expected_offset as usize != blob.len() {
            return Err(bad("trailing bytes after the last blob"));
        }
        let params = ModelParameters::from_tensors(&header.config, tensors)?;
        Ok(Checkpoint {
            config: header.config,
            params,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
