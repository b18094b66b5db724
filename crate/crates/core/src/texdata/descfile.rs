//! Descriptor-map file:
//!
//! ```text
//! "MRDLDESC"            8 bytes
//! version: u32 = 1
//! levels:  u32
//! per level: N: u32, D: u32, N·D × f32     (row-major, descriptor by descriptor)
//! label:   u32
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::encoding::DescriptorBatch;
use crate::error::{Error, FormatError, Result};

pub const DESC_MAGIC: &[u8; 8] = b"MRDLDESC";
pub const DESC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMaps {
    pub levels: Vec<DescriptorBatch>,
    pub label: u32,
}

pub fn encode_descriptor_maps(maps: &DescriptorMaps) -> Vec<u8> {
    let payload: usize = maps.levels.iter().map(|b| 8 + 4 * b.n() * b.d()).sum();
    let mut out = Vec::with_capacity(20 + payload);
    out.extend_from_slice(DESC_MAGIC);
    out.extend_from_slice(&DESC_VERSION.to_le_bytes());
    out.extend_from_slice(&(maps.levels.len() as u32).to_le_bytes());
    for b in &maps.levels {
        out.extend_from_slice(&(b.n() as u32).to_le_bytes());
        out.extend_from_slice(&(b.d() as u32).to_le_bytes());
        for &v in b.descriptors().data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&maps.label.to_le_bytes());
    out
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode_descriptor_maps(bytes: &[u8]) -> std::result::Result<DescriptorMaps, FormatError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(DESC_MAGIC.len()).map_err(|_| FormatError::BadMagic {
        expected: "MRDLDESC",
    })?;
    if magic != DESC_MAGIC {
        return Err(FormatError::BadMagic {
            expected: "MRDLDESC",
        });
    }
    let version = r.u32()?;
    if version != DESC_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let n_levels = r.u32()? as usize;
    if n_levels == 0 {
        return Err(FormatError::InvalidHeader("zero levels".into()));
    }
    let mut levels = Vec::with_capacity(n_levels.min(16));
    for level in 0..n_levels {
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        if n == 0 || d == 0 {
            return Err(FormatError::InvalidHeader(format!(
                "level {level} has N={n}, D={d}"
            )));
        }
        let len = n
            .checked_mul(d)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| FormatError::InvalidHeader(format!("level {level} too large")))?;
        let raw = r.take(len)?;
        let mut data = Vec::with_capacity(n * d);
        for (index, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(FormatError::NonFinitePayload { level, index });
            }
            data.push(v as f64);
        }
        levels.push(
            DescriptorBatch::from_rows(n, d, data)
                .map_err(|e| FormatError::InvalidHeader(e.to_string()))?,
        );
    }
    let label = r.u32()?;
    if r.remaining() != 0 {
        return Err(FormatError::TrailingBytes(r.remaining()));
    }
    Ok(DescriptorMaps { levels, label })
}

pub fn write_descriptor_maps(path: impl AsRef<Path>, maps: &DescriptorMaps) -> Result<()> {
    fs::write(path, encode_descriptor_maps(maps))?;
    Ok(())
}

pub fn load_descriptor_maps(path: impl AsRef<Path>) -> Result<DescriptorMaps> {
    let bytes = fs::read(path)?;
    decode_descriptor_maps(&bytes).map_err(Error::from)
}
