//! `EDKP` named-tensor files.
//!
//! Layout (little-endian): magic `EDKP`, `u32` tensor count, then per tensor
//! `u16` name length, UTF-8 name, `u8` rank, `rank` x `u32` dims and the
//! `f64` payload.

use std::path::Path;

use super::{Tensor, MAX_RANK};
use crate::error::{Error, Result};
use crate::image::write_all_atomic;

const MAGIC: &[u8; 4] = b"EDKP";

pub fn encode_checkpoint(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(tensors.len()).map_err(|_| Error::InvalidArgument("too many tensors for EDKP".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len =
            u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            let d =
                u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} of {name} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::Parse("truncated EDKP checkpoint".into()));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::Parse("missing EDKP magic".into()));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|_| Error::Parse("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = take(1)?[0] as usize;
        if rank > MAX_RANK {
            return Err(Error::Parse(format!("tensor {name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Parse("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if pos != bytes.len() {
        return Err(Error::Parse(format!(
            "{} trailing bytes after EDKP payload",
            bytes.len() - pos
        )));
    }
    Ok(out)
}

pub fn write_checkpoint(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    write_all_atomic(path.as_ref(), &encode_checkpoint(tensors)?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}
