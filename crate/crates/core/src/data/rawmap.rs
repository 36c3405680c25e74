//! The `SGMAP001` raw map format: 8 ASCII magic bytes, a little-endian `u32`
//! rank, `rank` little-endian `u32` dimensions, then the row-major payload as
//! little-endian `f32`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RAW_MAP_MAGIC: &[u8; 8] = b"SGMAP001";

pub fn encode_raw_map(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() == 0 {
        return Err(Error::invalid("raw maps need at least one dimension"));
    }
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(RAW_MAP_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raw_map(bytes: &[u8]) -> Result<Tensor> {
    let what = "SGMAP001";
    if bytes.len() < 12 {
        return Err(Error::format(what, "file shorter than its header"));
    }
    if &bytes[..8] != RAW_MAP_MAGIC {
        return Err(Error::format(
            what,
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..8])),
        ));
    }
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::format(what, "truncated header"))
    };
    let rank = word(8)? as usize;
    if rank == 0 {
        return Err(Error::format(what, "empty shape"));
    }
    let shape = (0..rank).map(|i| word(12 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    if shape.contains(&0) {
        return Err(Error::format(what, format!("zero dimension in {shape:?}")));
    }
    let start = 12 + 4 * rank;
    let count: usize = shape.iter().product();
    let payload = &bytes[start..];
    if payload.len() != 4 * count {
        return Err(Error::format(
            what,
            format!("payload has {} bytes, shape {shape:?} needs {}", payload.len(), 4 * count),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn save_raw_map(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_raw_map(t)?)?;
    Ok(())
}

pub fn load_raw_map(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_raw_map(&std::fs::read(path)?)
}
