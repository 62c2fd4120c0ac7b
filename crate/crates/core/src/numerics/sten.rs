//! STEN v1 binary tensor format.
//!
//! ```text
//! 0..4   magic "STEN"
//! 4      version (1)
//! 5      dtype (0 = f32, 1 = f64)
//! 6      ndim
//! 7      reserved (0)
//! 8..    ndim x u64 little-endian dims
//! ..     row-major little-endian payload
//! ```

use std::fs;
use std::path::Path;

use super::tensor::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"STEN";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 8;

/// A decoded tensor of either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn from_tensor<T: Scalar>(t: Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, casting when the stored precision differs.
    pub fn into_dtype<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    /// Returns the tensor only if it is already stored as `T`.
    pub fn exact<T: Scalar>(self) -> Option<Tensor<T>> {
        (self.dtype() == T::DTYPE).then(|| self.into_dtype())
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(u8::try_from(t.ndim()).expect("STEN supports at most 255 dims"));
    out.push(0);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * t.ndim() + t.numel() * T::DTYPE.size());
    encode(t, &mut out);
    out
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

/// Decodes one tensor from the front of `bytes`. `base` is the absolute
/// offset of `bytes[0]` and is only used in error messages. Returns the
/// tensor and the number of bytes consumed.
pub fn decode(bytes: &[u8], base: usize) -> Result<(AnyTensor, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(base + bytes.len(), "truncated STEN header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(base, "bad STEN magic"));
    }
    if bytes[4] != VERSION {
        return Err(format_err(base + 4, format!("unsupported STEN version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5])
        .ok_or_else(|| format_err(base + 5, format!("unknown dtype code {}", bytes[5])))?;
    let ndim = bytes[6] as usize;
    if bytes[7] != 0 {
        return Err(format_err(base + 7, "reserved byte must be zero"));
    }
    let dims_end = HEADER_LEN + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(format_err(base + bytes.len(), "truncated STEN dims"));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for i in 0..ndim {
        let at = HEADER_LEN + 8 * i;
        let d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let d = usize::try_from(d).map_err(|_| format_err(base + at, "dimension too large"))?;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| format_err(base + at, "element count overflows"))?;
        shape.push(d);
    }
    let payload = numel
        .checked_mul(dtype.size())
        .ok_or_else(|| format_err(base + dims_end, "payload size overflows"))?;
    let end = dims_end + payload;
    if bytes.len() < end {
        return Err(format_err(
            base + bytes.len(),
            format!("payload needs {payload} bytes for shape {shape:?}, only {} present", bytes.len() - dims_end),
        ));
    }
    let body = &bytes[dims_end..end];
    let tensor = match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(shape, body.chunks_exact(4).map(f32::read_le).collect())?),
        DType::F64 => AnyTensor::F64(Tensor::new(shape, body.chunks_exact(8).map(f64::read_le).collect())?),
    };
    Ok((tensor, end))
}

/// Decodes a buffer holding exactly one tensor.
pub fn from_bytes(bytes: &[u8]) -> Result<AnyTensor> {
    let (t, used) = decode(bytes, 0)?;
    if used != bytes.len() {
        return Err(format_err(used, format!("{} trailing bytes after payload", bytes.len() - used)));
    }
    Ok(t)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, to_bytes(t))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<AnyTensor> {
    from_bytes(&fs::read(path)?)
}
