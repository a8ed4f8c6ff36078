//! Binary checkpoint format.
//!
//! ```text
//! "GMSRF1" | u32 LE header length | JSON header | f32 LE payload | u32 LE CRC-32 of payload
//! ```
//!
//! The header holds the model config, an index of named tensors (shape and
//! byte offset into the payload) and the step counters of every batch-norm
//! layer. Parameters come first in registration order, followed by each
//! batch-norm layer's running mean and running variance.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 6] = b"GMSRF1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub bn_steps: Vec<u64>,
}

fn running_names(bn: &str) -> [String; 2] {
    [format!("{bn}.running_mean"), format!("{bn}.running_var")]
}

/// Serialises a model to checkpoint bytes.
pub fn to_bytes(model: &Model<f32>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: Shape, data: &[f32]| {
        tensors.push(TensorEntry { name, shape: shape.dims(), offset: payload.len() });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in model.store.params() {
        push(p.name.clone(), p.value.shape(), p.value.data());
    }
    for b in model.store.bn_buffers() {
        let shape = Shape::vector(b.state.mean.len());
        let [m, v] = running_names(&b.name);
        push(m, shape, &b.state.mean);
        push(v, shape, &b.state.var);
    }
    let header = Header {
        config: model.config().clone(),
        tensors,
        bn_steps: model.store.bn_buffers().iter().map(|b| b.state.tracked).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses checkpoint bytes into a model.
pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let prefix = &bytes[..bytes.len().min(MAGIC.len())];
    if prefix != &MAGIC[..prefix.len()] {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(prefix),
            std::str::from_utf8(MAGIC).unwrap()
        )));
    }
    let truncated = || Error::Corruption(format!("checkpoint truncated at {} bytes", bytes.len()));
    if bytes.len() < MAGIC.len() + 4 {
        return Err(truncated());
    }
    let header_len = read_u32(bytes, MAGIC.len()) as usize;
    let payload_start = MAGIC.len() + 4 + header_len;
    if bytes.len() < payload_start + 4 {
        return Err(truncated());
    }
    let header: Header = serde_json::from_slice(&bytes[MAGIC.len() + 4..payload_start])
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let payload_len = bytes.len() - payload_start - 4;
    let expected_len: usize = header.tensors.iter().map(|t| 4 * t.shape.iter().product::<usize>()).sum();
    if payload_len < expected_len {
        return Err(truncated());
    }
    if payload_len > expected_len {
        return Err(Error::Corruption(format!("checkpoint has {} trailing bytes", payload_len - expected_len)));
    }
    let payload = &bytes[payload_start..payload_start + payload_len];
    let stored = read_u32(bytes, payload_start + payload_len);
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::Corruption(format!("payload CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }

    let mut model = Model::<f32>::new(&header.config)?;
    let n_params = model.store.params().len();
    let n_bn = model.store.bn_buffers().len();
    if header.tensors.len() != n_params + 2 * n_bn || header.bn_steps.len() != n_bn {
        return Err(Error::Format(format!(
            "checkpoint lists {} tensors / {} bn layers; config implies {} / {n_bn}",
            header.tensors.len(),
            header.bn_steps.len(),
            n_params + 2 * n_bn
        )));
    }
    let mut entries = header.tensors.iter();
    let mut take = |name: &str, shape: Shape| -> Result<Vec<f32>> {
        let e = entries.next().unwrap();
        if e.name != name || e.shape != shape.dims() {
            return Err(Error::Format(format!(
                "tensor {} {:?} does not match expected {name} {:?}",
                e.name,
                e.shape,
                shape.dims()
            )));
        }
        let len = 4 * shape.numel();
        if e.offset + len > payload.len() {
            return Err(Error::Format(format!("tensor {name} offset out of range")));
        }
        Ok(payload[e.offset..e.offset + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    for p in model.store.params_mut() {
        let shape = p.value.shape();
        p.value = Tensor::new(shape, take(&p.name, shape)?)?;
    }
    for (b, &steps) in model.store.bn_buffers_mut().iter_mut().zip(&header.bn_steps) {
        let shape = Shape::vector(b.state.mean.len());
        let [m, v] = running_names(&b.name);
        b.state.mean = take(&m, shape)?;
        b.state.var = take(&v, shape)?;
        b.state.tracked = steps;
    }
    Ok(model)
}

/// Writes atomically: a temporary file in the target directory, then rename.
pub fn save(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Reads only the config from a checkpoint header.
pub fn read_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    Ok(load(path)?.net.config)
}
