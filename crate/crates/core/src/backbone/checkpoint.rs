//! `CPNB1` checkpoints: magic, u32 little-endian header length, JSON header,
//! then raw little-endian f32 parameters in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneError, BackboneModel, ModelConfig};
use crate::corpus::atomic_write;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 5] = b"CPNB1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a backbone checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated: need {need} bytes, found {found}")]
    Truncated { need: usize, found: usize },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("config hash {stored:#018x} in header does not match config ({computed:#018x})")]
    HashMismatch { stored: u64, computed: u64 },
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    config_hash: u64,
    frozen: bool,
    params: Vec<Entry>,
}

impl BackboneModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let params = self
            .param_names()
            .iter()
            .zip(self.params())
            .map(|(name, p)| {
                let e = Entry { name: name.clone(), shape: p.shape().to_vec(), offset };
                offset += p.len() * 4;
                e
            })
            .collect();
        let header = Header { config: self.config.clone(), config_hash: self.config_hash(), frozen: self.frozen, params };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(9 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BackboneError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let need = MAGIC.len() + 4;
        if bytes.len() < need {
            return Err(CheckpointError::Truncated { need, found: bytes.len() }.into());
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        if bytes.len() < need + hlen {
            return Err(CheckpointError::Truncated { need: need + hlen, found: bytes.len() }.into());
        }
        let header: Header =
            serde_json::from_slice(&bytes[need..need + hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let computed = header.config.hash();
        if computed != header.config_hash {
            return Err(CheckpointError::HashMismatch { stored: header.config_hash, computed }.into());
        }
        let payload = &bytes[need + hlen..];
        let total: usize = header.params.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
        if payload.len() < total {
            return Err(CheckpointError::Truncated { need: need + hlen + total, found: bytes.len() }.into());
        }
        if payload.len() > total {
            return Err(CheckpointError::Header(format!("{} trailing bytes", payload.len() - total)).into());
        }
        let mut params = Vec::with_capacity(header.params.len());
        for e in &header.params {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 4;
            if end > payload.len() {
                return Err(CheckpointError::Header(format!("{}: offset out of range", e.name)).into());
            }
            let data = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push(Tensor::new(e.shape.clone(), data)?);
        }
        let model = Self::from_parts(header.config, params, header.frozen)?;
        for (e, name) in header.params.iter().zip(model.param_names()) {
            if &e.name != name {
                return Err(CheckpointError::Header(format!("expected parameter {name}, found {}", e.name)).into());
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), BackboneError> {
        atomic_write(path, &self.to_bytes())
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source }.into())
    }

    pub fn load(path: &Path) -> Result<Self, BackboneError> {
        let bytes =
            fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}
