//! The `HIFT` binary tensor container.
//!
//! Layout, with no alignment padding: magic `HIFT`, version byte `0x01`,
//! dtype byte (0 = float32, 1 = float64), rank byte, `rank` little-endian
//! u64 extents, then the row-major little-endian payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 4] = b"HIFT";
pub const VERSION: u8 = 0x01;

/// A tensor of either supported precision, as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::Float32,
            AnyTensor::F64(_) => DType::Float64,
        }
    }

    pub fn into_f32(self) -> Tensor<f32> {
        match self {
            AnyTensor::F32(t) => t,
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn into_f64(self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t,
        }
    }
}

pub fn encoded_len<T: Float>(t: &Tensor<T>) -> usize {
    7 + 8 * t.rank() + t.numel() * T::DTYPE.size()
}

pub fn encode<T: Float>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::invalid_shape(t.dims(), "rank exceeds 255"));
    }
    let mut out = Vec::with_capacity(encoded_len(t));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn write_tensor<T: Float, W: Write>(mut w: W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(t)?)?;
    Ok(())
}

fn read_payload<T: Float, R: Read>(mut r: R, dims: Vec<usize>) -> Result<Tensor<T>> {
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor extents overflow".into()))?;
    let size = T::DTYPE.size();
    let mut bytes = vec![0u8; numel * size];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(dims, data)
}

pub fn read_any<R: Read>(mut r: R) -> Result<AnyTensor> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("missing HIFT magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported HIFT version {}", head[4])));
    }
    let dtype = DType::from_code(head[5])?;
    let rank = head[6] as usize;
    if rank == 0 {
        return Err(Error::Format("rank 0 tensor".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated extents: {e}")))?;
        let d = u64::from_le_bytes(b);
        dims.push(usize::try_from(d).map_err(|_| Error::Format("extent too large".into()))?);
    }
    Ok(match dtype {
        DType::Float32 => AnyTensor::F32(read_payload(r, dims)?),
        DType::Float64 => AnyTensor::F64(read_payload(r, dims)?),
    })
}

/// Reads a tensor, converting precision when the stored dtype differs.
pub fn read_tensor<T: Float, R: Read>(r: R) -> Result<Tensor<T>> {
    Ok(match read_any(r)? {
        AnyTensor::F32(t) => t.cast(),
        AnyTensor::F64(t) => t.cast(),
    })
}

pub fn save<T: Float>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    read_any(BufReader::new(File::open(path)?))
}
