//! The DCVW checkpoint container.
//!
//! ```text
//! "DCVW"            magic
//! u16               version (1)
//! u32, bytes        UTF-8 network configuration (TOML), may be empty
//! u32               entry count
//! per entry:        u16 name length, name bytes, u8 rank, rank × u32 extents,
//!                   u64 offset, u64 length   (relative to the payload start)
//! payload           one DCT1 blob per entry, back to back
//! ```
//!
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grad::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::io::{decode, encode, AnyTensor};

pub const DCVW_MAGIC: [u8; 4] = *b"DCVW";
pub const DCVW_VERSION: u16 = 1;

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub entries: Vec<(String, AnyTensor)>,
}

impl Checkpoint {
    pub fn from_params<T: Scalar>(config: &str, params: &ParamStore<T>) -> Self {
        Checkpoint {
            config: config.to_string(),
            entries: params
                .iter()
                .map(|p| {
                    let t = match T::PRECISION {
                        crate::Precision::Single => AnyTensor::Single(p.value.cast()),
                        crate::Precision::Double => AnyTensor::Double(p.value.cast()),
                    };
                    (p.name.clone(), t)
                })
                .collect(),
        }
    }

    /// Parameter store in precision `T`.
    pub fn to_params<T: Scalar>(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for (name, t) in &self.entries {
            store.insert(name.clone(), t.clone().into_tensor())?;
        }
        Ok(store)
    }

    pub fn encode(&self) -> Vec<u8> {
        let blobs: Vec<Vec<u8>> = self
            .entries
            .iter()
            .map(|(_, t)| match t {
                AnyTensor::Single(t) => encode(t),
                AnyTensor::Double(t) => encode(t),
            })
            .collect();
        let mut out = Vec::new();
        out.extend_from_slice(&DCVW_MAGIC);
        out.extend_from_slice(&DCVW_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for ((name, t), blob) in self.entries.iter().zip(&blobs) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            offset += blob.len() as u64;
        }
        for blob in blobs {
            out.extend_from_slice(&blob);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != DCVW_MAGIC {
            return Err(Error::format("DCVW", "missing magic"));
        }
        let version = r.u16()?;
        if version != DCVW_VERSION {
            return Err(Error::format("DCVW", format!("unsupported version {version}")));
        }
        let clen = r.u32()? as usize;
        let config = String::from_utf8(r.take(clen)?.to_vec())
            .map_err(|_| Error::format("DCVW", "configuration is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::format("DCVW", "parameter name is not UTF-8"))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let offset = r.u64()? as usize;
            let len = r.u64()? as usize;
            manifest.push((name, shape, offset, len));
        }
        let payload = &bytes[r.pos..];
        let mut expected_offset = 0;
        let mut entries = Vec::with_capacity(manifest.len());
        for (name, shape, offset, len) in manifest {
            if offset != expected_offset {
                return Err(Error::format("DCVW", format!("entry `{name}` is not contiguous")));
            }
            let blob = offset
                .checked_add(len)
                .and_then(|end| payload.get(offset..end))
                .ok_or_else(|| Error::format("DCVW", format!("entry `{name}` out of bounds")))?;
            let t = decode(blob)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::format(
                    "DCVW",
                    format!("entry `{name}` manifest shape {shape:?} disagrees with payload {:?}", t.shape()),
                ));
            }
            expected_offset = offset + len;
            entries.push((name, t));
        }
        if expected_offset != payload.len() {
            return Err(Error::format(
                "DCVW",
                format!("{} trailing bytes", payload.len() - expected_offset),
            ));
        }
        Ok(Checkpoint { config, entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("DCVW", "truncated header"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
