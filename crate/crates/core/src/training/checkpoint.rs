//! Checkpoint container.
//!
//! Layout: 8-byte magic, `u32` LE manifest length, UTF-8 JSON manifest, then
//! every tensor as contiguous little-endian f32 in manifest order. The
//! manifest carries a SHA-256 of the blob section.

use std::path::Path;

use apa_numerics::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LogEntry, Stage, TrainConfig};
use crate::backbone::{AdapterParams, BaseParams, UNetConfig};
use crate::error::{contract, ApaError, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"APACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset within the blob section.
    pub offset: usize,
    /// Byte length.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub stage: Stage,
    pub step: usize,
    pub config: TrainConfig,
    pub model: UNetConfig,
    pub metric_log: Vec<LogEntry>,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
    /// For adapter checkpoints: blob hash of the base they were trained on.
    pub base_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: ParamStore,
}

fn blobs(store: &ParamStore) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(store.len());
    let mut bytes = Vec::with_capacity(store.num_params() * 4);
    for (name, t) in store.iter() {
        let offset = bytes.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset, len: bytes.len() - offset });
    }
    (entries, bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the blob section a store would produce.
pub fn store_hash(store: &ParamStore) -> String {
    sha256_hex(&blobs(store).1)
}

impl Checkpoint {
    pub fn new(
        stage: Stage,
        step: usize,
        config: TrainConfig,
        model: UNetConfig,
        metric_log: Vec<LogEntry>,
        tensors: ParamStore,
        base_sha256: Option<String>,
    ) -> Self {
        let (entries, bytes) = blobs(&tensors);
        let manifest = Manifest {
            format: "apa-checkpoint".into(),
            version: CHECKPOINT_VERSION,
            stage,
            step,
            config,
            model,
            metric_log,
            tensors: entries,
            blob_sha256: sha256_hex(&bytes),
            base_sha256,
        };
        Self { manifest, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (_, bytes) = blobs(&self.tensors);
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        let mut out = Vec::with_capacity(12 + json.len() + bytes.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes);
        Ok(out)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.len() < 12 || &data[..8] != MAGIC {
            return Err(ApaError::Format("not a checkpoint (bad magic bytes)".into()));
        }
        let len = u32::from_le_bytes(data[8..12].try_into().expect("4 bytes")) as usize;
        let json = data.get(12..12 + len).ok_or_else(|| ApaError::Corrupt("manifest truncated".into()))?;
        let value: serde_json::Value = serde_json::from_slice(json)?;
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(ApaError::Format(format!(
                "checkpoint version {version:?} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let manifest: Manifest = serde_json::from_value(value)?;
        let blob = &data[12 + len..];
        if sha256_hex(blob) != manifest.blob_sha256 {
            return Err(ApaError::Corrupt("tensor data does not match the manifest hash".into()));
        }
        let mut tensors = ParamStore::new();
        let mut expected_offset = 0;
        for e in &manifest.tensors {
            let numel: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.len != numel * 4 || e.offset + e.len > blob.len() {
                return Err(ApaError::Corrupt(format!("tensor '{}' has an inconsistent extent", e.name)));
            }
            if tensors.contains(&e.name) {
                return Err(ApaError::Corrupt(format!("tensor '{}' listed twice", e.name)));
            }
            let values =
                blob[e.offset..e.offset + e.len].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?);
            expected_offset += e.len;
        }
        if expected_offset != blob.len() {
            return Err(ApaError::Corrupt("trailing bytes after the last tensor".into()));
        }
        let ckpt = Self { manifest, tensors };
        // Names must come back in manifest order, i.e. sorted and unique.
        if !ckpt.manifest.tensors.iter().map(|e| e.name.as_str()).eq(ckpt.tensors.names()) {
            return Err(ApaError::Corrupt("tensor list is not in canonical order".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn base_params(&self) -> Result<BaseParams> {
        if self.manifest.stage != Stage::Base {
            return Err(contract("expected a base checkpoint, got an adapter checkpoint"));
        }
        let (reference, _) = crate::backbone::init_params(&self.manifest.model, 0)?;
        if !reference.store.same_layout(&self.tensors) {
            return Err(contract("base checkpoint tensors do not match its model configuration"));
        }
        Ok(BaseParams { config: self.manifest.model.clone(), store: self.tensors.clone() })
    }

    /// Adapter weights, checked against the base they are combined with.
    pub fn adapter_params(&self, base: &Checkpoint) -> Result<AdapterParams> {
        if self.manifest.stage != Stage::Adapter {
            return Err(contract("expected an adapter checkpoint, got a base checkpoint"));
        }
        if self.manifest.base_sha256.as_deref() != Some(base.manifest.blob_sha256.as_str()) {
            return Err(contract("adapter checkpoint was trained on a different base checkpoint"));
        }
        let adapter = AdapterParams { store: self.tensors.clone() };
        adapter.check_against(&base.base_params()?)?;
        Ok(adapter)
    }
}
