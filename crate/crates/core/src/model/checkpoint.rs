//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "TPE2DCK1"
//! 8 bytes   u64 header length H
//! H bytes   UTF-8 JSON header {dtype, step, config, metadata, tensors: [{name, shape, offset, len}]}
//! rest      raw tensor data, each tensor `len` elements of `dtype` starting at byte `offset`
//! ```
//!
//! Parameters are stored under their names; Adam moments under `opt.m.<name>`
//! and `opt.v.<name>`. Values are written bit-for-bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Result, TpeError};
use crate::numerics::{ParamStore, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"TPE2DCK1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    step: u64,
    config: ModelConfig,
    #[serde(default)]
    metadata: serde_json::Value,
    tensors: Vec<Entry>,
}

/// A loaded checkpoint.
pub struct Checkpoint<T: Scalar> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub metadata: serde_json::Value,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model,
    store: &ParamStore<T>,
    metadata: serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let mut push = |name: String, t: &Tensor<T>, entries: &mut Vec<Entry>| {
        entries.push(Entry { name, shape: t.shape().to_vec(), offset: blob.len(), len: t.numel() });
        blob.extend(T::to_le_bytes_vec(t.data()));
    };
    for id in store.ids() {
        push(store.name(id).to_string(), store.value(id), &mut entries);
    }
    for id in store.ids() {
        let (m, v) = store.moments(id);
        push(format!("opt.m.{}", store.name(id)), m, &mut entries);
        push(format!("opt.v.{}", store.name(id)), v, &mut entries);
    }
    let header = Header {
        dtype: T::NAME.to_string(),
        step: store.step(),
        config: model.config.clone(),
        metadata,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&blob)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint, converting element type if it was saved in another precision.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| TpeError::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
    let blob = &bytes[body_start..];
    let read = |e: &Entry| -> Result<Tensor<T>> {
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(bad(&format!("unknown dtype {other}"))),
        };
        let end = e.offset + e.len * width;
        if end > blob.len() {
            return Err(bad(&format!("tensor {} out of range", e.name)));
        }
        let raw = &blob[e.offset..end];
        let t = if header.dtype == T::NAME {
            Tensor::new(e.shape.clone(), T::from_le_bytes_slice(raw))?
        } else if width == 4 {
            Tensor::<f32>::new(e.shape.clone(), f32::from_le_bytes_slice(raw))?.cast()
        } else {
            Tensor::<f64>::new(e.shape.clone(), f64::from_le_bytes_slice(raw))?.cast()
        };
        Ok(t)
    };
    let mut store = ParamStore::new();
    let mut moments = Vec::new();
    for e in &header.tensors {
        if e.name.starts_with("opt.") {
            moments.push(e);
        } else {
            store.add(&e.name, read(e)?)?;
        }
    }
    for e in moments {
        let (kind, name) = e.name[4..].split_at(2);
        let id = store.id(name).ok_or_else(|| bad(&format!("moment for unknown parameter {name}")))?;
        let t = read(e)?;
        let (m, v) = store.moments(id);
        let (m, v) = if kind == "m." { (t, v.clone()) } else { (m.clone(), t) };
        store.set_optimizer_state(id, m, v)?;
    }
    store.set_step(header.step);
    let model = Model::bind(header.config, &store)?;
    Ok(Checkpoint { model, store, metadata: header.metadata })
}
