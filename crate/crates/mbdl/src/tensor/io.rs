//! Binary tensor files and CSV export.
//!
//! File layout, all little-endian:
//!
//! ```text
//! bytes 0..8    magic "MBDLTNSR"
//! bytes 8..12   rank, u32
//! then          rank x u64 extents
//! then          product(extents) x f64 payload, row-major
//! ```
//!
//! Decoding validates the payload length against the extents *before*
//! allocating, rejects non-finite entries, and never trusts declared sizes.

use super::Tensor;
use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MBDLTNSR";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + t.shape().len() * 8 + t.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!(
            "tensor file truncated: {} bytes, need at least 12",
            bytes.len()
        )));
    }
    if &bytes[0..8] != MAGIC {
        return Err(Error::Format("bad magic, not a tensor file".into()));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    let extents_len = rank
        .checked_mul(8)
        .ok_or_else(|| Error::Format("rank overflows header size".into()))?;
    if body.len() < extents_len {
        return Err(Error::Format(format!(
            "tensor file truncated: rank {} needs {} extent bytes, have {}",
            rank,
            extents_len,
            body.len()
        )));
    }
    let mut shape = Vec::with_capacity(rank.min(64));
    let mut count: u64 = 1;
    for i in 0..rank {
        let e = u64::from_le_bytes(body[i * 8..i * 8 + 8].try_into().unwrap());
        count = count
            .checked_mul(e)
            .ok_or_else(|| Error::Format("extent product overflows".into()))?;
        let e_usize = usize::try_from(e)
            .map_err(|_| Error::Format(format!("extent {} does not fit in usize", e)))?;
        shape.push(e_usize);
    }
    let payload = &body[extents_len..];
    let expected = count
        .checked_mul(8)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if payload.len() as u64 != expected {
        return Err(Error::Format(format!(
            "payload length {} does not match extents {:?} (expected {} bytes)",
            payload.len(),
            shape,
            expected
        )));
    }
    let mut data = Vec::with_capacity(count as usize);
    for chunk in payload.chunks_exact(8) {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format(format!(
                "non-finite entry {} at element {}",
                v,
                data.len()
            )));
        }
        data.push(v);
    }
    Tensor::new(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path.as_ref()).map_err(|e| {
        Error::Format(format!(
            "cannot read tensor file {}: {}",
            path.as_ref().display(),
            e
        ))
    })?;
    decode_tensor(&bytes)
}

/// CSV export: header row `c0..c{w-1}`, then one row per trailing-dimension
/// slice, 17 significant digits.
pub fn write_csv<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let width = *t.shape().last().unwrap_or(&1);
    let width = if t.rank() == 0 { 1 } else { width };
    let header: Vec<String> = (0..width).map(|j| format!("c{}", j)).collect();
    writeln!(w, "{}", header.join(","))?;
    if width == 0 {
        return Ok(());
    }
    for row in t.data().chunks(width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{:.16e}", v)).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}
