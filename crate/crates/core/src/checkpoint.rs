//! Single-file checkpoint container:
//!
//! ```text
//! magic "INCTXCKP" | u32 LE format version | u64 LE header length |
//! JSON header | safetensors payload
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::device;

pub const MAGIC: &[u8; 8] = b"INCTXCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `egn`, `egn-prime`, `pose-transfer`, `mcrn` or `frn`.
    pub network: String,
    pub resolution: u32,
    pub palette_hash: String,
    /// Last completed optimizer step.
    pub step: u64,
    pub seed: u64,
    /// Word position of the run's data-sampling generator.
    pub rng_word_pos: u128,
    /// Network configuration as written by the model.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut names: Vec<&String> = self.tensors.keys().collect();
        names.sort();
        let ordered: Vec<(&str, &Tensor)> = names.iter().map(|n| (n.as_str(), &self.tensors[*n])).collect();
        let payload = safetensors::serialize(ordered, None).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let end = 20usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..end])?;
        let tensors = candle_core::safetensors::load_buffer(&bytes[end..], &device())?;
        Ok(Self { header, tensors })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::from(e).at(&tmp))?;
            f.write_all(&bytes).map_err(|e| Error::from(e).at(&tmp))?;
            f.sync_all().map_err(|e| Error::from(e).at(&tmp))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::from(e).at(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).at(path))?;
        Self::from_bytes(&bytes).map_err(|e| e.at(path))
    }

    /// Rejects checkpoints written for another network, resolution or palette.
    pub fn expect(&self, network: &str, resolution: u32, palette_hash: &str) -> Result<()> {
        let h = &self.header;
        if h.network != network {
            return Err(Error::Checkpoint(format!("checkpoint is for {}, expected {network}", h.network)));
        }
        if h.resolution != resolution {
            return Err(Error::ResolutionMismatch {
                expected: resolution,
                actual: h.resolution,
            });
        }
        if h.palette_hash != palette_hash {
            return Err(Error::Checkpoint(format!(
                "palette {} does not match {palette_hash}",
                h.palette_hash
            )));
        }
        Ok(())
    }
}

/// Keeps only entries under `prefix.` with the prefix stripped.
pub fn strip_prefix(tensors: &HashMap<String, Tensor>, prefix: &str) -> HashMap<String, Tensor> {
    let p = format!("{prefix}.");
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
        .collect()
}

pub fn with_prefix(prefix: &str, tensors: impl IntoIterator<Item = (String, Tensor)>) -> HashMap<String, Tensor> {
    tensors.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)).collect()
}
