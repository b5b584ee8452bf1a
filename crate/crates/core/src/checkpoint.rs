//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version (LE), `u64` metadata length
//! (LE), JSON metadata, then a safetensors blob with every tensor.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BSUPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// What the checkpoint holds, e.g. `vqgan` or `ldm`.
    pub kind: String,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    /// Named fingerprints used to detect mismatched artifacts.
    pub fingerprints: BTreeMap<String, String>,
    /// Snapshot of the configuration that produced the weights.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let err = |detail: String| Error::Checkpoint { path: path.to_path_buf(), detail };
        let meta = serde_json::to_vec(&self.meta)?;
        let sorted: BTreeMap<&String, &Tensor> = self.tensors.iter().collect();
        let body = safetensors::serialize(sorted, None).map_err(|e| err(e.to_string()))?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(MAGIC)?;
            f.write_all(&FORMAT_VERSION.to_le_bytes())?;
            f.write_all(&(meta.len() as u64).to_le_bytes())?;
            f.write_all(&meta)?;
            f.write_all(&body)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let err = |detail: String| Error::Checkpoint { path: path.to_path_buf(), detail };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(err(format!("unsupported format version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let meta_end = 20usize
            .checked_add(meta_len)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| err("truncated metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[20..meta_end])?;
        let tensors = candle_core::safetensors::load_buffer(&bytes[meta_end..], device)?;
        Ok(Self { meta, tensors })
    }

    /// Tensors whose names start with `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> HashMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors.iter().filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone()))).collect()
    }

    pub fn insert_section(&mut self, prefix: &str, tensors: impl IntoIterator<Item = (String, Tensor)>) {
        for (k, v) in tensors {
            self.tensors.insert(format!("{prefix}.{k}"), v);
        }
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                detail: format!("expected a {kind} checkpoint, found {}", self.meta.kind),
            });
        }
        Ok(())
    }

    pub fn fingerprint(&self, name: &str) -> Option<&str> {
        self.meta.fingerprints.get(name).map(String::as_str)
    }
}

/// SHA-256 of a value's canonical JSON, truncated to 16 hex chars.
pub fn fingerprint_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).unwrap_or_default();
    hex::encode(&Sha256::digest(&json)[..8])
}
