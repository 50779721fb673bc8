//! Binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SCMN" | version u32 | count u32
//! count x ( name_len u32 | name | rank u32 | dims u32 x rank | data f64 x numel )
//! checksum u64   (FNV-1a over every preceding byte)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;
use crate::vit::EncoderConfig;

const MAGIC: &[u8; 4] = b"SCMN";
pub const FORMAT_VERSION: u32 = 1;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} does not fit in 32 bits")))
}

pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(params.len(), "tensor count")?.to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.rank(), "rank")?.to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Parses and verifies a checkpoint, returning its named tensors in order.
pub fn from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 20 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if payload.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint(
            "bad magic bytes, not a checkpoint".into(),
        ));
    }
    let actual = fnv1a64(payload);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch (stored {stored:016x}, computed {actual:016x}); file is corrupted"
        )));
    }
    let mut r = Reader {
        bytes: payload,
        pos: 4,
    };
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("dims of {name} overflow")))?;
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != payload.len() {
        return Err(Error::Checkpoint(
            "trailing bytes after the last tensor".into(),
        ));
    }
    Ok(out)
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, to_bytes(params)?).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and checks every tensor against `config`.
pub fn load(path: &Path, config: &EncoderConfig) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelParams::from_named(config, from_bytes(&bytes)?)
}
