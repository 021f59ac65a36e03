//! Binary tensor records and named-tensor archives.
//!
//! A record is the magic `DMTS`, then little-endian `u32` version, `u32`
//! dtype code (1 = f32, 2 = f64), `u32` rank, `rank` × `u64` dims and the
//! row-major payload. An archive is a `u64` entry count followed by, per
//! entry, a `u64` name length, the UTF-8 name and one record.

use std::fs;
use std::path::Path;

use super::{numel, DType, Float, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DMTS";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

pub fn encode<T: Float>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE.code().to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes one record, converting the payload to `T` if it was stored in
/// the other precision.
fn decode_at<T: Float>(cur: &mut Cursor<'_>) -> Result<Tensor<T>> {
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let code = cur.u32()?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    let rank = cur.u32()? as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(usize::try_from(cur.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflow".into()))?;
    let bytes_len = n.checked_mul(dtype.size()).ok_or_else(|| Error::Format("payload overflow".into()))?;
    let payload = cur.take(bytes_len)?;
    let data: Vec<T> = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| T::from_f64c(f32::read_le(c) as f64)).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| T::from_f64c(f64::read_le(c))).collect(),
    };
    debug_assert_eq!(data.len(), numel(&shape));
    Tensor::new(data, &shape)
}

pub fn decode<T: Float>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let t = decode_at(&mut cur)?;
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(t)
}

pub fn save<T: Float>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    encode(t, &mut out);
    fs::write(path, out)?;
    Ok(())
}

pub fn load<T: Float>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode(&fs::read(path)?)
}

pub fn encode_archive<T: Float>(entries: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode(t, &mut out);
    }
    out
}

pub fn decode_archive<T: Float>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let count = cur.u64()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = usize::try_from(cur.u64()?).map_err(|_| Error::Format("name length overflow".into()))?;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        entries.push((name, decode_at(&mut cur)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(entries)
}

pub fn save_archive<T: Float>(entries: &[(String, Tensor<T>)], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_archive(entries))?;
    Ok(())
}

pub fn load_archive<T: Float>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<T>)>> {
    decode_archive(&fs::read(path)?)
}
