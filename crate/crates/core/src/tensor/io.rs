//! The STT1 binary tensor format.
//!
//! Layout: magic `STT1`, `u32` rank, `rank` x `u64` extents, then the
//! row-major `f64` values. All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const STT_MAGIC: &[u8; 4] = b"STT1";

pub fn write_stt<W: Write>(t: &Tensor, mut w: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.numel());
    buf.extend_from_slice(STT_MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_stt<R: Read>(mut r: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(e.to_string()))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Tensor> {
    let short = || Error::Format("truncated input".into());
    if bytes.len() < 8 || &bytes[..4] != STT_MAGIC {
        return Err(Error::Format("missing STT1 magic".into()));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut pos = 8;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes.get(pos..pos + 8).ok_or_else(short)?;
        shape.push(u64::from_le_bytes(chunk.try_into().unwrap()) as usize);
        pos += 8;
    }
    let numel: usize = shape.iter().product();
    let body = bytes.get(pos..).ok_or_else(short)?;
    if body.len() != numel * 8 {
        return Err(Error::Format(format!(
            "expected {} value bytes for shape {shape:?}, found {}",
            numel * 8,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_stt_file(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_stt(t, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn read_stt_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
