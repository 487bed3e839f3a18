//! Binary checkpoint format: magic `CTGLIP01`, a length-prefixed JSON
//! header (configs, step, optimizer step count, text-encoder digest,
//! tensor size), then parameters and both Adam moment vectors as raw
//! little-endian f64. Everything round-trips bitwise.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;

use super::TrainConfig;

/// First eight bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CTGLIP01";

/// A full training snapshot: resuming from it continues the exact
/// trajectory of the uninterrupted run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub loss_config: LossConfig,
    /// Optimization steps completed.
    pub step: u64,
    /// Adam's bias-correction counter (equals `step` in normal runs).
    pub adam_t: u64,
    /// `state_digest()` of the frozen text encoder used for training.
    pub text_digest: u64,
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    loss_config: LossConfig,
    step: u64,
    adam_t: u64,
    text_digest: u64,
    n_params: u64,
}

fn write_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s<'a>(bytes: &'a [u8], n: usize, path: &Path) -> Result<(Vec<f64>, &'a [u8])> {
    let need = n * 8;
    if bytes.len() < need {
        return Err(Error::parse(
            path,
            format!("checkpoint truncated: needed {need} tensor bytes, found {}", bytes.len()),
        ));
    }
    let values = bytes[..need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((values, &bytes[need..]))
}

/// Serialize to the binary layout (exposed for digest tests).
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.clone(),
        loss_config: ckpt.loss_config,
        step: ckpt.step,
        adam_t: ckpt.adam_t,
        text_digest: ckpt.text_digest,
        n_params: ckpt.params.len() as u64,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::validation(format!("unserializable checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(8 + 4 + header_json.len() + ckpt.params.len() * 24);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    write_f64s(&mut out, &ckpt.params);
    write_f64s(&mut out, &ckpt.adam_m);
    write_f64s(&mut out, &ckpt.adam_v);
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if ckpt.adam_m.len() != ckpt.params.len() || ckpt.adam_v.len() != ckpt.params.len() {
        return Err(Error::validation(
            "checkpoint moment vectors must match the parameter count",
        ));
    }
    let bytes = checkpoint_bytes(ckpt)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::parse(path, "not a checkpoint file (bad magic)"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::parse(path, "checkpoint truncated inside header"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| Error::parse(path, format!("bad checkpoint header: {e}")))?;
    let n = header.n_params as usize;
    let rest = &bytes[12 + header_len..];
    let (params, rest) = read_f64s(rest, n, path)?;
    let (adam_m, rest) = read_f64s(rest, n, path)?;
    let (adam_v, rest) = read_f64s(rest, n, path)?;
    if !rest.is_empty() {
        return Err(Error::parse(
            path,
            format!("{} trailing bytes after checkpoint payload", rest.len()),
        ));
    }
    Ok(Checkpoint {
        model_config: header.model_config,
        train_config: header.train_config,
        loss_config: header.loss_config,
        step: header.step,
        adam_t: header.adam_t,
        text_digest: header.text_digest,
        params,
        adam_m,
        adam_v,
    })
}
