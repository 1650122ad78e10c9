//! `GRD1` single-grid raster files.
//!
//! Little-endian layout:
//!
//! | offset | type      | field                                  |
//! |--------|-----------|----------------------------------------|
//! | 0      | `[u8; 4]` | magic `GRD1`                           |
//! | 4      | `u32`     | rows                                   |
//! | 8      | `u32`     | cols                                   |
//! | 12     | `f64`     | lat0 (center of north-west cell)       |
//! | 20     | `f64`     | lon0                                   |
//! | 28     | `f64`     | dlat                                   |
//! | 36     | `f64`     | dlon                                   |
//! | 44     | `f32`...  | rows * cols values, row-major          |
//!
//! Values are held as `f64` in memory and rounded to `f32` on write.

use std::path::Path;

use super::{GeoGrid, GridError, Result};

pub const GRD_MAGIC: [u8; 4] = *b"GRD1";
const HEADER_LEN: usize = 44;

pub fn encode_grd(g: &GeoGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * g.values().len());
    out.extend_from_slice(&GRD_MAGIC);
    out.extend_from_slice(&(g.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(g.cols() as u32).to_le_bytes());
    for v in [g.lat0, g.lon0, g.dlat, g.dlon] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in g.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_grd(bytes: &[u8]) -> Result<GeoGrid> {
    if bytes.len() < 4 {
        return Err(GridError::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != GRD_MAGIC {
        return Err(GridError::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(GridError::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let (rows, cols) = (u32_at(4) as u64, u32_at(8) as u64);
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| usize::try_from(n).ok())
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(GridError::DimensionOverflow { rows, cols })?;
    if bytes.len() < payload {
        return Err(GridError::Truncated { expected: payload, found: bytes.len() });
    }
    if bytes.len() > payload {
        return Err(GridError::TrailingBytes(bytes.len() - payload));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    GeoGrid::new(rows as usize, cols as usize, f64_at(12), f64_at(20), f64_at(28), f64_at(36), values)
}

pub fn write_raster(g: &GeoGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_grd(g))
        .map_err(|source| GridError::Io { path: path.display().to_string(), source })
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<GeoGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|source| GridError::Io { path: path.display().to_string(), source })?;
    decode_grd(&bytes)
}
