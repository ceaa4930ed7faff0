//! Little-endian binary checkpoints.
//!
//! Layout: `"MAOD"`, version (`u16`), 32-byte architecture fingerprint, then
//! one record per array until end of file: name length (`u16`), UTF-8 name,
//! frozen flag (`u8`), rank (`u8`), `rank` dimensions (`u32` each) and the
//! values as `f64`.

use std::path::Path;

use thiserror::Error;

use crate::backbone::{ModelBundle, Param};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MAOD";
pub const VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("architecture fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(bundle: &ModelBundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(bundle.fingerprint());
    for (name, p) in bundle.iter() {
        let shape = p.tensor.shape();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.frozen as u8);
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated {
                offset: self.bytes.len(),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelBundle, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let fingerprint: [u8; 32] = r.take(32)?.try_into().unwrap();
    let mut bundle = ModelBundle::new(fingerprint);
    while !r.done() {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("array name is not UTF-8".into()))?
            .to_string();
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(CheckpointError::Malformed(format!("frozen flag {f} for {name}"))),
        };
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflows")))?;
        let raw = r.take(count.checked_mul(8).ok_or(CheckpointError::Truncated {
            offset: bytes.len(),
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        let param = Param { tensor, frozen };
        if bundle.insert(name.clone(), param).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate array {name}")));
        }
    }
    Ok(bundle)
}

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> crate::Result<()> {
    std::fs::write(path, encode(bundle))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> crate::Result<ModelBundle> {
    Ok(decode(&std::fs::read(path)?)?)
}

/// Loads a checkpoint and rejects it unless it was written for `fingerprint`.
pub fn load_expecting(path: &Path, fingerprint: &[u8; 32]) -> crate::Result<ModelBundle> {
    let bundle = load_checkpoint(path)?;
    if bundle.fingerprint() != fingerprint {
        return Err(CheckpointError::FingerprintMismatch {
            expected: hex(fingerprint),
            found: hex(bundle.fingerprint()),
        }
        .into());
    }
    Ok(bundle)
}
