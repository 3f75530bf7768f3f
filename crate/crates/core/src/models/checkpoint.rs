//! Single-file checkpoint container.
//!
//! Layout (little endian):
//! `b"TTACKPT1"`, `u32` header length, JSON header `{config_hash, config}`,
//! `u32` entry count, then per entry: `u16` name length, name, `u8` tag code,
//! `u8` rank, `u32` dims, `f64` values.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdaptableModel, ModelConfig};
use crate::error::{Result, TtaError};
use crate::nn::{ParamGroupTag, Tensor};

const MAGIC: &[u8; 8] = b"TTACKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    config_hash: String,
    config: ModelConfig,
}

pub fn encode_checkpoint(model: &AdaptableModel) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header { config_hash: model.config().hash(), config: model.config().clone() })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (_, p) in model.params().iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.tag.code());
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &AdaptableModel, path: impl AsRef<Path>) -> Result<()> {
    if let Some(parent) = path.as_ref().parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

fn take<const N: usize>(cur: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    cur.read_exact(&mut buf).map_err(|_| TtaError::Checkpoint("truncated file".into()))?;
    Ok(buf)
}

/// Decodes a checkpoint. When `expected` is given, its hash must match the
/// stored one.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<AdaptableModel> {
    let mut cur = Cursor::new(bytes);
    if &take::<8>(&mut cur)? != MAGIC {
        return Err(TtaError::Checkpoint("bad magic".into()));
    }
    let header_len = u32::from_le_bytes(take(&mut cur)?) as usize;
    let mut header = vec![0u8; header_len];
    cur.read_exact(&mut header).map_err(|_| TtaError::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header)?;
    if header.config.hash() != header.config_hash {
        return Err(TtaError::Checkpoint("header hash does not match stored config".into()));
    }
    if let Some(cfg) = expected {
        if cfg.hash() != header.config_hash {
            return Err(TtaError::ConfigHashMismatch { expected: cfg.hash(), found: header.config_hash });
        }
    }
    let mut model = AdaptableModel::new(header.config, 0)?;
    let count = u32::from_le_bytes(take(&mut cur)?) as usize;
    if count != model.params().len() {
        return Err(TtaError::Checkpoint(format!("{count} entries, model has {}", model.params().len())));
    }
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut cur)?) as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name).map_err(|_| TtaError::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| TtaError::Checkpoint("non-utf8 name".into()))?;
        let [tag] = take::<1>(&mut cur)?;
        let tag = ParamGroupTag::from_code(tag).ok_or_else(|| TtaError::Checkpoint(format!("bad tag for {name}")))?;
        let [rank] = take::<1>(&mut cur)?;
        let shape: Vec<usize> =
            (0..rank).map(|_| take::<4>(&mut cur).map(|b| u32::from_le_bytes(b) as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| take::<8>(&mut cur).map(f64::from_le_bytes)).collect::<Result<_>>()?;
        let id = model.params().find(&name).ok_or_else(|| TtaError::Checkpoint(format!("unknown entry {name}")))?;
        let slot = model.params().get(id);
        if slot.tag != tag || slot.value.shape() != shape.as_slice() {
            return Err(TtaError::Checkpoint(format!("entry {name} has wrong tag or shape")));
        }
        *model.params_mut().value_mut(id) = Tensor::new(shape, data);
    }
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<AdaptableModel> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(TtaError::CheckpointMissing(path.to_path_buf()));
    }
    decode_checkpoint(&fs::read(path)?, expected)
}
