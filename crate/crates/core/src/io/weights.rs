//! The SPMM weights container.
//!
//! ```text
//! 0   "SPMM"
//! 4   version            u16 LE
//! 6   manifest length    u32 LE
//! 10  manifest           UTF-8 JSON
//! ..  zero padding up to the next multiple of 64
//! P   payload region     tensors in manifest order, each starting at P + offset
//!                        (offset a multiple of 64), raw little-endian values
//! end CRC32 of the payload region, u32 LE
//! ```
//!
//! The manifest lists tensors sorted by name, each with `name`, `dtype`
//! (`f32`/`f64`), `shape`, `offset` and `nbytes`, plus the model
//! configuration when one was saved. The payload region ends exactly at the
//! end of the last tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::WeightTree;
use crate::scalar::DType;
use crate::{Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"SPMM";
pub const VERSION: u16 = 1;
pub const PAYLOAD_ALIGN: usize = 64;
const HEADER: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: Option<ModelConfig>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightsFile<T: Scalar> {
    pub config: Option<ModelConfig>,
    pub tree: WeightTree<T>,
}

fn align(n: usize) -> usize {
    n.div_ceil(PAYLOAD_ALIGN) * PAYLOAD_ALIGN
}

fn malformed(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        what: "weights file",
        offset: offset as u64,
        detail: detail.into(),
    }
}

pub fn encode_weights<T: Scalar>(tree: &WeightTree<T>, config: Option<&ModelConfig>) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(tree.len());
    let mut cursor = 0usize;
    for (name, t) in tree.iter() {
        let nbytes = t.numel() * T::DTYPE.size();
        tensors.push(TensorEntry {
            name: name.clone(),
            dtype: T::DTYPE.name().into(),
            shape: t.shape().to_vec(),
            offset: cursor as u64,
            nbytes: nbytes as u64,
        });
        cursor = align(cursor + nbytes);
    }
    let manifest = Manifest {
        config: config.cloned(),
        tensors,
    };
    let text = serde_json::to_vec(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let manifest_len = u32::try_from(text.len()).map_err(|_| malformed(6, "manifest too large"))?;

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&manifest_len.to_le_bytes());
    out.extend_from_slice(&text);
    out.resize(align(out.len()), 0);
    let start = out.len();
    for (entry, (_, t)) in manifest.tensors.iter().zip(tree.iter()) {
        out.resize(start + entry.offset as usize, 0);
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn read_values<T: Scalar>(bytes: &[u8], dtype: DType) -> Vec<T> {
    let size = dtype.size();
    bytes
        .chunks_exact(size)
        .map(|c| match dtype {
            d if d == T::DTYPE => T::read_le(c),
            DType::F32 => T::lit(f32::read_le(c) as f64),
            DType::F64 => T::lit(f64::read_le(c)),
        })
        .collect()
}

/// Parses a weights file. Tensors stored in the other precision are
/// converted to `T`.
pub fn decode_weights<T: Scalar>(bytes: &[u8]) -> Result<WeightsFile<T>> {
    if bytes.len() < HEADER {
        return Err(malformed(bytes.len(), "file shorter than the header"));
    }
    if bytes[..4] != MAGIC {
        return Err(malformed(0, "bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let manifest_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let manifest_end = HEADER + manifest_len;
    if manifest_end > bytes.len() {
        return Err(malformed(bytes.len(), "manifest runs past the end of the file"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER..manifest_end])
        .map_err(|e| malformed(HEADER + e.column().saturating_sub(1), format!("manifest: {e}")))?;
    let start = align(manifest_end);
    if bytes.len() < start + 4 {
        return Err(malformed(bytes.len(), "missing payload checksum"));
    }
    if bytes[manifest_end..start].iter().any(|&b| b != 0) {
        return Err(malformed(manifest_end, "non-zero padding after the manifest"));
    }
    let payload = &bytes[start..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut tree = WeightTree::new();
    let mut end = 0usize;
    let mut prev_name: Option<&str> = None;
    for e in &manifest.tensors {
        let at = start + e.offset as usize;
        let dtype = DType::parse(&e.dtype).ok_or_else(|| malformed(at, format!("`{}`: unknown dtype `{}`", e.name, e.dtype)))?;
        if prev_name.is_some_and(|p| p >= e.name.as_str()) {
            return Err(malformed(at, format!("`{}` breaks the sorted, unique name order", e.name)));
        }
        let numel: usize = e.shape.iter().product();
        if e.nbytes as usize != numel * dtype.size() {
            return Err(malformed(at, format!("`{}`: {} bytes for shape {:?}", e.name, e.nbytes, e.shape)));
        }
        let offset = e.offset as usize;
        if offset % PAYLOAD_ALIGN != 0 || offset < end {
            return Err(malformed(at, format!("`{}`: offset {offset} is misaligned or overlaps", e.name)));
        }
        let stop = offset + e.nbytes as usize;
        if stop > payload.len() {
            return Err(malformed(at, format!("`{}` runs past the payload", e.name)));
        }
        let values = read_values::<T>(&payload[offset..stop], dtype);
        tree.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?)?;
        end = stop;
        prev_name = Some(&e.name);
    }
    if payload.len() != end {
        return Err(malformed(start + end, "trailing bytes after the last tensor"));
    }
    Ok(WeightsFile {
        config: manifest.config,
        tree,
    })
}

pub fn save_weights<T: Scalar>(tree: &WeightTree<T>, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, encode_weights(tree, None)?)?)
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<WeightTree<T>> {
    Ok(decode_weights(&std::fs::read(path)?)?.tree)
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, encode_weights(&model.weights, Some(&model.config))?)?)
}

/// Loads a file written by [`save_model`]; the stored layout is checked
/// against the stored configuration.
pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let file = decode_weights(&std::fs::read(path)?)?;
    let config = file
        .config
        .ok_or_else(|| Error::Config("weights file carries no model configuration".into()))?;
    Model::from_parts(config, file.tree)
}
