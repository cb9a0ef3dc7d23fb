use super::{Architecture, DenoiserModel, NoiseSchedule};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DSCK";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checksum mismatch")]
    Checksum,
    #[error("descriptor: {0}")]
    Descriptor(String),
    #[error("parameter count {got} does not match descriptor ({want})")]
    ParamCount { got: usize, want: usize },
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("non-finite parameter")]
    NonFinite,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    architecture: Architecture,
    schedule: NoiseSchedule,
}

/// Layout: magic, version (u32 LE), descriptor length (u32 LE), descriptor
/// JSON, parameter count (u64 LE), parameters (f64 LE), SHA-256 of all
/// preceding bytes.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let desc = serde_json::to_vec(&Descriptor {
        architecture: ck.model.arch.clone(),
        schedule: ck.schedule.clone(),
    })
    .expect("descriptor serializes");
    let mut out = Vec::with_capacity(desc.len() + ck.model.params.len() * 8 + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(&desc);
    out.extend_from_slice(&(ck.model.params.len() as u64).to_le_bytes());
    for p in &ck.model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 + 4 + 4 + 8 + 32 {
        return Err(if bytes.starts_with(MAGIC) { CheckpointError::Truncated } else { CheckpointError::BadMagic });
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    let dlen = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let desc_end = 12 + dlen;
    if body.len() < desc_end + 8 {
        return Err(CheckpointError::Truncated);
    }
    let desc: Descriptor = serde_json::from_slice(&body[12..desc_end]).map_err(|e| CheckpointError::Descriptor(e.to_string()))?;
    let n = u64::from_le_bytes(body[desc_end..desc_end + 8].try_into().unwrap()) as usize;
    let raw = &body[desc_end + 8..];
    if raw.len() != n * 8 {
        return Err(CheckpointError::Truncated);
    }
    let want = desc.architecture.param_count();
    if n != want {
        return Err(CheckpointError::ParamCount { got: n, want });
    }
    let params: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(CheckpointError::NonFinite);
    }
    desc.schedule.validate().map_err(|e| CheckpointError::Schedule(e.to_string()))?;
    Ok(Checkpoint {
        model: DenoiserModel {
            arch: desc.architecture,
            params,
        },
        schedule: desc.schedule,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}
