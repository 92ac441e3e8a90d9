//! Self-describing binary model container.
//!
//! Layout: magic `SCRV`, u32 LE format version, u64 LE header length, UTF-8
//! JSON header (architecture, training config, epoch, seed, loss history,
//! dtype, tensor index), then raw little-endian tensor payloads in index
//! order. Loading validates magic, version, dtype, and payload bounds before
//! materializing anything, and can enforce an expected architecture.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::{ArchKind, ArchSpec, EmbeddingNet, Param};
use crate::scalar::Dtype;
use crate::trainer::{LossHistory, TrainConfig};
use crate::{Error, Result, Scalar};

pub const MAGIC: [u8; 4] = *b"SCRV";
pub const FORMAT_VERSION: u32 = 1;

/// Fixed bytes before the JSON header: magic, version, header length.
const PREAMBLE_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload region.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchSpec,
    input_hw: (usize, usize),
    config: TrainConfig,
    epoch: usize,
    seed: u64,
    history: LossHistory,
    dtype: Dtype,
    tensors: Vec<TensorEntry>,
}

/// A restored or about-to-be-saved model plus its training provenance.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub net: EmbeddingNet<T>,
    pub config: TrainConfig,
    pub epoch: usize,
    pub seed: u64,
    pub history: LossHistory,
}

impl<T: Scalar> Checkpoint<T> {
    /// Errors unless the stored architecture family matches `expected`.
    pub fn require_arch(&self, expected: ArchKind) -> Result<()> {
        if self.net.kind() != expected {
            return Err(Error::ArchMismatch {
                expected: expected.to_string(),
                found: self.net.kind().to_string(),
            });
        }
        Ok(())
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let mut offset = 0u64;
    let tensors: Vec<TensorEntry> = ckpt
        .net
        .params()
        .iter()
        .map(|p| {
            let entry = TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                offset,
            };
            offset += (p.data.len() * T::DTYPE.size_bytes()) as u64;
            entry
        })
        .collect();
    let header = Header {
        arch: ckpt.net.arch().clone(),
        input_hw: ckpt.net.input_hw(),
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        seed: ckpt.seed,
        history: ckpt.history.clone(),
        dtype: T::DTYPE,
        tensors,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut bytes = Vec::with_capacity(PREAMBLE_LEN + header_json.len() + offset as usize);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for p in ckpt.net.params() {
        for &x in &p.data {
            x.write_le(&mut bytes);
        }
    }
    Ok(std::fs::write(path, bytes)?)
}

fn truncated(path: &Path, reason: impl Into<String>) -> Error {
    Error::CheckpointTruncated {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < PREAMBLE_LEN {
        return Err(truncated(path, "file shorter than the fixed preamble"));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::CheckpointMagic {
            path: path.to_path_buf(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = PREAMBLE_LEN
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| truncated(path, "header extends past end of file"))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE_LEN..payload_start])
        .map_err(|e| truncated(path, format!("unparseable header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(Error::CheckpointDtype {
            path: path.to_path_buf(),
            expected: format!("{:?}", T::DTYPE).to_lowercase(),
            found: format!("{:?}", header.dtype).to_lowercase(),
        });
    }

    let payload = &bytes[payload_start..];
    let elem = T::DTYPE.size_bytes();
    let mut params = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(numel * elem)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| {
                truncated(path, format!("tensor {} extends past end of file", entry.name))
            })?;
        let data: Vec<T> = payload[start..end]
            .chunks_exact(elem)
            .map(T::read_le)
            .collect();
        params.push(Param {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            data,
        });
    }

    // Rebuild at the stored seed, then overwrite with the stored weights; the
    // name/shape match doubles as a header-vs-architecture consistency check.
    let mut net = EmbeddingNet::new(header.arch, header.input_hw, header.seed)?;
    net.load_params(params)?;
    Ok(Checkpoint {
        net,
        config: header.config,
        epoch: header.epoch,
        seed: header.seed,
        history: header.history,
    })
}
