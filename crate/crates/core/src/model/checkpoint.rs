//! Binary parameter checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a TOML header
//! describing the model config and every tensor (name, shape, group, offset),
//! then all values as little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetrModel, ModelConfig, ModelError, ParamGroup, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LDETRCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    tensor: Vec<TensorEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(model: &DetrModel, path: &Path) -> Result<()> {
    let mut offset = 0;
    let tensor = model
        .store
        .iter()
        .map(|(_, p)| {
            let e = TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                group: p.group,
                offset,
            };
            offset += p.value.len();
            e
        })
        .collect();
    let header = toml::to_string(&Header {
        model: model.config.clone(),
        tensor,
    })
    .map_err(|e| ModelError::Checkpoint {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;

    let mut buf = Vec::with_capacity(20 + header.len() + offset * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for (_, p) in model.store.iter() {
        for v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&buf).map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<DetrModel> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let fail = |reason: String| ModelError::Checkpoint {
        path: path.display().to_string(),
        reason,
    };
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_bytes = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| fail("truncated header".into()))?;
    let header_text = std::str::from_utf8(header_bytes).map_err(|e| fail(e.to_string()))?;
    let header: Header = toml::from_str(header_text).map_err(|e| fail(e.to_string()))?;
    let data = &bytes[20 + hlen..];

    let mut model = DetrModel::new(header.model)?;
    if header.tensor.len() != model.store.len() {
        return Err(fail(format!(
            "{} tensors stored, model has {}",
            header.tensor.len(),
            model.store.len()
        )));
    }
    for entry in &header.tensor {
        let id = model
            .store
            .by_name(&entry.name)
            .ok_or_else(|| fail(format!("unknown tensor {}", entry.name)))?;
        let p = model.store.get_mut(id);
        if p.shape != entry.shape {
            return Err(fail(format!(
                "tensor {} has shape {:?}, expected {:?}",
                entry.name, entry.shape, p.shape
            )));
        }
        let n = p.value.len();
        let raw = data
            .get(entry.offset * 8..(entry.offset + n) * 8)
            .ok_or_else(|| fail(format!("tensor {} is truncated", entry.name)))?;
        for (v, chunk) in p.value.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(model)
}
