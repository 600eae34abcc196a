//! The OXT1 tensor container: magic `OXT1`, u32 LE rank, rank × u32 LE dims,
//! then the f32 LE values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OXT1";

pub fn write<W: Write>(t: &Tensor, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.dims().len() as u32).to_le_bytes())?;
    for &d in t.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.dims().len() + 4 * t.numel());
    write(t, &mut out).expect("writing to a Vec cannot fail");
    out
}

/// Parses one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn parse(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4-byte slice")))
            .ok_or_else(|| Error::Format("truncated OXT1 header".into()))
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::Format("missing OXT1 magic".into()));
    }
    let ndim = word(4)? as usize;
    let mut dims = Vec::with_capacity(ndim.min(16));
    let mut numel: usize = 1;
    for i in 0..ndim {
        let d = word(8 + 4 * i)? as usize;
        numel = numel
            .checked_mul(d)
            .filter(|_| d > 0)
            .ok_or_else(|| Error::Format(format!("invalid OXT1 dimension {d}")))?;
        dims.push(d);
    }
    let start = 8 + 4 * ndim;
    let end = numel
        .checked_mul(4)
        .and_then(|n| n.checked_add(start))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("OXT1 payload shorter than dims {dims:?} require")))?;
    let data = bytes[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Ok((Tensor::new(&dims, data)?, end))
}

pub fn read<R: Read>(mut r: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("reading OXT1 stream: {e}")))?;
    let (t, used) = parse(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after OXT1 tensor", bytes.len() - used)));
    }
    Ok(t)
}

pub fn save(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(t)).map_err(|e| Error::io("writing tensor", path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io("reading tensor", path, e))?;
    read(bytes.as_slice())
}
