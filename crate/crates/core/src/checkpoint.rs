//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `GRNCKPT1`, a little-endian `u64` header length,
//! a JSON header, then every parameter's values as little-endian floats in
//! header order. The header carries a SHA-256 of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocab;
use crate::error::{GrnError, Result};
use crate::model::{check_params, ModelConfig, ModelParams};
use crate::numcore::{Real, Tensor};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"GRNCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab_hash: String,
    pub params: ModelParams<T>,
    /// Epoch (from 1) at which the parameters were captured.
    pub epoch: usize,
    pub dev_f1: f64,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    model: ModelConfig,
    train: TrainConfig,
    vocab_hash: String,
    epoch: usize,
    dev_f1: f64,
    params: Vec<Entry>,
    payload_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes `ckpt` in the precision of `T`.
pub fn checkpoint_bytes<T: Real>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    check_params(&ckpt.model, &ckpt.params)?;
    let mut payload = Vec::with_capacity(ckpt.params.num_values() * T::BYTES);
    for (_, t) in ckpt.params.iter() {
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.to_string(),
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        vocab_hash: ckpt.vocab_hash.clone(),
        epoch: ckpt.epoch,
        dev_f1: ckpt.dev_f1,
        params: ckpt
            .params
            .iter()
            .map(|(n, t)| Entry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        payload_sha256: sha256_hex(&payload),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint<T: Real>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(ckpt)?)?;
    Ok(())
}

fn truncated() -> GrnError {
    GrnError::Checksum
}

fn split(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 {
        return Err(if bytes.len() >= 8 || MAGIC.starts_with(bytes) {
            truncated()
        } else {
            GrnError::Checkpoint("not a checkpoint file".into())
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(GrnError::Checkpoint("not a checkpoint file".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(truncated());
    }
    let header: Header = serde_json::from_slice(&body[..len]).map_err(|_| truncated())?;
    if header.version != CHECKPOINT_VERSION {
        return Err(GrnError::Version {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok((header, &body[len..]))
}

/// Element type (`"f32"` or `"f64"`) the file was written in.
pub fn checkpoint_dtype(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(split(&bytes)?.0.dtype)
}

fn decode<T: Real, S: Real>(payload: &[u8], header: &Header) -> Result<ModelParams<T>> {
    let mut params = ModelParams::default();
    let mut at = 0;
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let bytes = payload.get(at..at + n * S::BYTES).ok_or_else(truncated)?;
        let data = bytes
            .chunks_exact(S::BYTES)
            .map(|c| T::lit(S::read_le(c).as_f64()))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        at += n * S::BYTES;
    }
    if at != payload.len() {
        return Err(GrnError::Checksum);
    }
    Ok(params)
}

/// Parses a checkpoint, converting values to `T`. With `vocab`, refuses a file
/// written for a different vocabulary.
pub fn checkpoint_from_bytes<T: Real>(bytes: &[u8], vocab: Option<&Vocab>) -> Result<Checkpoint<T>> {
    let (header, payload) = split(bytes)?;
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(GrnError::Checksum);
    }
    if let Some(v) = vocab {
        let found = v.hash();
        if found != header.vocab_hash {
            return Err(GrnError::VocabMismatch {
                expected: header.vocab_hash,
                found,
            });
        }
    }
    let params = match header.dtype.as_str() {
        "f32" => decode::<T, f32>(payload, &header)?,
        "f64" => decode::<T, f64>(payload, &header)?,
        other => return Err(GrnError::Checkpoint(format!("unknown dtype `{other}`"))),
    };
    check_params(&header.model, &params)?;
    Ok(Checkpoint {
        model: header.model,
        train: header.train,
        vocab_hash: header.vocab_hash,
        params,
        epoch: header.epoch,
        dev_f1: header.dev_f1,
    })
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>, vocab: Option<&Vocab>) -> Result<Checkpoint<T>> {
    checkpoint_from_bytes(&std::fs::read(path)?, vocab)
}
