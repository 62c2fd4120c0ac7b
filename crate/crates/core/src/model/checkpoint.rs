//! SCKP v1: `"SCKP"`, version byte, u32 LE entry count, then per entry a
//! u16 LE name length, the UTF-8 name and an embedded STEN tensor.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::sten::{self, AnyTensor};
use crate::numerics::{ParamStore, Scalar, Tensor};

pub const SCKP_MAGIC: &[u8; 4] = b"SCKP";
pub const SCKP_VERSION: u8 = 1;

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

/// Ordered named tensors. Model parameters and optimizer state share
/// one namespace.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, AnyTensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push((name.into(), AnyTensor::from_tensor(t.clone())));
    }

    pub fn from_store<T: Scalar>(store: &ParamStore<T>) -> Self {
        let mut c = Self::new();
        for p in store.iter() {
            c.push(p.name.clone(), &p.value);
        }
        c
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Entry `name` in precision `T`; a dtype mismatch is an error rather
    /// than a silent cast.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Index(format!("checkpoint has no entry `{name}`")))?;
        t.clone().exact::<T>().ok_or_else(|| {
            Error::Config(format!(
                "checkpoint entry `{name}` is {:?}, expected {:?}",
                t.dtype(),
                T::DTYPE
            ))
        })
    }

    /// Overwrites every parameter of `store` from same-named entries.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for p in store.iter_mut() {
            let t = self.tensor::<T>(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint entry `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(SCKP_MAGIC);
        out.push(SCKP_VERSION);
        let count = u32::try_from(self.entries.len()).map_err(|_| fmt_err(5, "too many entries"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| fmt_err(out.len(), format!("name of {} bytes exceeds u16", name.len())))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match t {
                AnyTensor::F32(t) => sten::encode(t, &mut out),
                AnyTensor::F64(t) => sten::encode(t, &mut out),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let take = |at: usize, n: usize, what: &str| -> Result<&[u8]> {
            bytes
                .get(at..at + n)
                .ok_or_else(|| fmt_err(at, format!("truncated while reading {what}")))
        };
        if take(0, 4, "magic")? != SCKP_MAGIC {
            return Err(fmt_err(0, "bad magic, expected SCKP"));
        }
        let version = take(4, 1, "version")?[0];
        if version != SCKP_VERSION {
            return Err(fmt_err(4, format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(5, 4, "entry count")?.try_into().expect("4 bytes")) as usize;
        let mut pos = 9;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(take(pos, 2, "name length")?.try_into().expect("2 bytes")) as usize;
            pos += 2;
            let name = std::str::from_utf8(take(pos, len, "name")?)
                .map_err(|_| fmt_err(pos, "name is not UTF-8"))?
                .to_string();
            pos += len;
            let (t, used) = sten::decode(&bytes[pos..], pos)?;
            pos += used;
            entries.push((name, t));
        }
        if pos != bytes.len() {
            return Err(fmt_err(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
