//! Versioned, checksummed parameter checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "SCPCKPT\0" | u32 format version | 32-byte model hash
//! | u64 config length | config JSON
//! | u32 tensor count | per tensor: u32 name length, name, u64 rows, u64 cols, f64 data
//! | 32-byte SHA-256 of everything above
//! ```
//!
//! The model hash covers the encoder config, the label list and the target
//! mode: everything that fixes the parameter layout and meaning. Training
//! hyperparameters are stored but may differ on resume.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Result, TrainConfig, TrainError};
use crate::encoder::{EncoderConfig, ParamSet};
use crate::matrix::Matrix;
use crate::prompt::TargetMode;

pub const MAGIC: &[u8; 8] = b"SCPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub encoder: EncoderConfig,
    pub labels: Vec<String>,
    pub target_mode: TargetMode,
    pub train: TrainConfig,
}

impl CheckpointConfig {
    pub fn model_hash(&self) -> [u8; 32] {
        let identity = serde_json::to_vec(&(&self.encoder, &self.labels, self.target_mode)).expect("config serializes");
        Sha256::digest(identity).into()
    }

    /// Errors with `VersionMismatch` when `other` describes a different model.
    pub fn ensure_compatible(&self, other: &CheckpointConfig) -> Result<()> {
        let (a, b) = (self.model_hash(), other.model_hash());
        if a != b {
            return Err(TrainError::VersionMismatch(format!(
                "checkpoint model hash {} does not match configured model {}",
                hex(&a[..8]),
                hex(&b[..8])
            )));
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_checkpoint(params: &ParamSet, config: &CheckpointConfig) -> Vec<u8> {
    let json = serde_json::to_vec(config).expect("config serializes");
    let mut out = Vec::with_capacity(64 + json.len() + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&config.model_hash());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainError::CorruptFile("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| TrainError::CorruptFile("length overflow".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamSet, CheckpointConfig)> {
    if bytes.len() < MAGIC.len() + 4 + 32 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(TrainError::CorruptFile("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(TrainError::CorruptFile("checksum mismatch".into()));
    }
    let mut c = Cursor { bytes: body, pos: MAGIC.len() };
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(TrainError::VersionMismatch(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let hash: [u8; 32] = c.take(32)?.try_into().expect("32 bytes");
    let json_len = c.len()?;
    let config: CheckpointConfig = serde_json::from_slice(c.take(json_len)?)
        .map_err(|e| TrainError::CorruptFile(format!("config: {e}")))?;
    if config.model_hash() != hash {
        return Err(TrainError::VersionMismatch("stored config does not match its model hash".into()));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec()).map_err(|_| TrainError::CorruptFile("tensor name".into()))?;
        let (rows, cols) = (c.len()?, c.len()?);
        let n = rows.checked_mul(cols).ok_or_else(|| TrainError::CorruptFile("tensor shape".into()))?;
        let raw = c.take(n.checked_mul(8).ok_or_else(|| TrainError::CorruptFile("tensor shape".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        entries.push((name, Matrix::from_vec(rows, cols, data)));
    }
    if c.pos != body.len() {
        return Err(TrainError::CorruptFile("trailing bytes".into()));
    }
    Ok((ParamSet::new(entries), config))
}

pub fn save_checkpoint(params: &ParamSet, config: &CheckpointConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params, config)).map_err(|source| TrainError::Io { path: path.to_owned(), source })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamSet, CheckpointConfig)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TrainError::Io { path: path.to_owned(), source })?;
    decode_checkpoint(&bytes)
}
