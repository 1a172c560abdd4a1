//! Model checkpoints: magic `HIFC`, a little-endian u32 header length, a
//! JSON header, then every parameter as a `HIFT` record. Offsets in the
//! index are relative to the first byte after the header.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HifModel, ModelConfig};
use crate::tensor::io::{encode, read_any};
use crate::tensor::{DType, Float};

pub const MAGIC: &[u8; 4] = b"HIFC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub name: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Motion-loss weight the weights were trained with.
    pub lambda: f64,
    pub dtype: String,
    pub index: Vec<IndexEntry>,
}

pub struct Checkpoint<T: Float> {
    pub model: HifModel<T>,
    pub step: u64,
    pub lambda: f64,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::Float32 => "f32",
        DType::Float64 => "f64",
    }
}

/// Serializes `model`; identical inputs give identical bytes.
pub fn to_bytes<T: Float>(model: &HifModel<T>, step: u64, lambda: f64) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut index = Vec::with_capacity(model.store.len());
    for (name, t) in model.store.iter() {
        let bytes = encode(t)?;
        index.push(IndexEntry {
            name: name.to_string(),
            offset: payload.len() as u64,
            len: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        step,
        lambda,
        dtype: dtype_name(T::DTYPE).to_string(),
        index,
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save<T: Float>(path: impl AsRef<Path>, model: &HifModel<T>, step: u64, lambda: f64) -> Result<()> {
    let bytes = to_bytes(model, step, lambda)?;
    let mut f = std::fs::File::create(path.as_ref())?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing HIFC magic".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let end = 8usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint(format!("header length {len} exceeds file size {}", bytes.len())))?;
    let header: Header = serde_json::from_slice(&bytes[8..end])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    Ok((header, end))
}

/// Rebuilds the model from `bytes`, converting to `T` if the file was
/// written in the other precision.
pub fn from_bytes<T: Float>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, start) = read_header(bytes)?;
    let mut model = HifModel::<T>::new(header.config.clone(), 0)
        .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
    let payload = &bytes[start..];
    let mut seen = HashSet::new();
    let mut covered = 0usize;
    for entry in &header.index {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {:?}", entry.name)))?;
        if !seen.insert(id) {
            return Err(Error::Checkpoint(format!("parameter {:?} appears twice", entry.name)));
        }
        let lo = usize::try_from(entry.offset).ok();
        let hi = lo.and_then(|lo| lo.checked_add(usize::try_from(entry.len).ok()?));
        let record = match (lo, hi) {
            (Some(lo), Some(hi)) if hi <= payload.len() => &payload[lo..hi],
            _ => {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?} lies outside the payload",
                    entry.name
                )))
            }
        };
        covered += record.len();
        let mut cursor = record;
        let any = read_any(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Checkpoint(format!("trailing bytes in record {:?}", entry.name)));
        }
        let t = match any.dtype() {
            DType::Float32 => any.into_f32().cast::<T>(),
            DType::Float64 => any.into_f64().cast::<T>(),
        };
        let want = model.store.get(id).dims().to_vec();
        if t.dims() != want.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {:?} has dims {:?}, config expects {:?}",
                entry.name,
                t.dims(),
                want
            )));
        }
        model.store.set(id, t)?;
    }
    if seen.len() != model.store.len() {
        let missing: Vec<&str> = model
            .store
            .ids()
            .filter(|id| !seen.contains(id))
            .map(|id| model.store.name(id))
            .collect();
        return Err(Error::Checkpoint(format!("missing parameters: {}", missing.join(", "))));
    }
    // records are written back to back; anything else is damage
    if covered != payload.len() {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, index covers {covered}",
            payload.len()
        )));
    }
    Ok(Checkpoint {
        model,
        step: header.step,
        lambda: header.lambda,
    })
}

pub fn load<T: Float>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.as_ref().display())))?
        .read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
