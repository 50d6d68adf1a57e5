//! Binary model checkpoints.
//!
//! Layout: `FATCKPT1`, `u32` config length, config text, `u32` tensor count,
//! then per tensor `u32` name length, name bytes, `u32` rank, `u32` dims and
//! little-endian `f32` values. All integers are little-endian. Batch-norm
//! running statistics are stored alongside the trainable tensors.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::config::{KeyValues, MODEL_KEYS};
use crate::data::Reader;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FATCKPT1";

pub fn encode(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = model.config.to_kv().render();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let entries = model.store.entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Decoded {
    config: ModelConfig,
    tensors: Vec<(String, Tensor<f32>)>,
}

fn decode_raw(bytes: &[u8]) -> Result<Decoded> {
    let mut rd = Reader::new(bytes);
    let magic = rd.take(MAGIC.len()).map_err(|_| Error::BadMagic { expected: "FATCKPT1" })?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: "FATCKPT1" });
    }
    let len = rd.u32()? as usize;
    let text = std::str::from_utf8(rd.take(len)?)
        .map_err(|e| Error::Config(format!("checkpoint config is not UTF-8: {e}")))?;
    let kv = KeyValues::parse(text)?;
    if let Some(k) = kv.keys().find(|k| !MODEL_KEYS.contains(k)) {
        return Err(Error::Config(format!("unknown model key `{k}` in checkpoint")));
    }
    let config = ModelConfig::from_kv(&kv)?;
    let count = rd.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let n = rd.u32()? as usize;
        let name = String::from_utf8(rd.take(n)?.to_vec())
            .map_err(|e| Error::InvalidArgument(format!("tensor name is not UTF-8: {e}")))?;
        let rank = rd.u32()? as usize;
        let shape: Vec<usize> = rd.u32s(rank)?.into_iter().map(|d| d as usize).collect();
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Truncated(format!("tensor `{name}` size overflows")))?;
        let data = rd.f32s(numel)?;
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    if rd.remaining() != 0 {
        return Err(Error::TrailingBytes(rd.remaining()));
    }
    Ok(Decoded { config, tensors })
}

/// Loads tensors into a fresh model built from `config`. The model is only
/// returned once every tensor has been matched.
fn assemble(config: ModelConfig, tensors: Vec<(String, Tensor<f32>)>) -> Result<Model<f32>> {
    let mut model = Model::<f32>::new(config, 0)?;
    let mut seen = HashSet::new();
    for (name, t) in tensors {
        if model.store.lookup(&name).is_none() {
            return Err(Error::UnexpectedTensor(name));
        }
        model.store.set(&name, t)?;
        seen.insert(name);
    }
    if let Some(e) = model.store.entries().iter().find(|e| !seen.contains(&e.name)) {
        return Err(Error::MissingTensor(e.name.clone()));
    }
    Ok(model)
}

pub fn decode(bytes: &[u8]) -> Result<Model<f32>> {
    let d = decode_raw(bytes)?;
    assemble(d.config, d.tensors)
}

/// Decodes the tensors of a checkpoint into a model with a caller-chosen
/// configuration; mismatched shapes are reported by tensor name.
pub fn decode_as(bytes: &[u8], config: &ModelConfig) -> Result<Model<f32>> {
    let d = decode_raw(bytes)?;
    assemble(config.clone(), d.tensors)
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_as(path: &Path, config: &ModelConfig) -> Result<Model<f32>> {
    decode_as(&fs::read(path).map_err(|e| Error::io(path, e))?, config)
}
