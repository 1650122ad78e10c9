//! `SRC1` checkpoint files.
//!
//! Little-endian layout: magic `SRC1`; six `u32` architecture fields
//! `c, n1, n2, f1, f2, f3`; `c` normalization means then `c` standard
//! deviations (`f64`); then `W1, B1, W2, B2, W3, B3` as `f64`, each weight
//! tensor in `[out, in, k, k]` order.

use std::path::Path;

use super::network::{Architecture, SrcnnParams};
use super::{NnError, Result};
use crate::grid::{NormStats, STD_FLOOR};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SRC1";

pub fn encode_checkpoint(p: &SrcnnParams) -> Vec<u8> {
    let a = p.arch;
    let mut out = Vec::with_capacity(28 + 8 * (2 * a.channels + a.parameter_count()));
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    for d in [a.channels, a.n1, a.n2, a.f1, a.f2, a.f3] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in p.norm.mean.iter().chain(&p.norm.std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for layer in &p.layers {
        for v in layer.weights.iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(NnError::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(NnError::Architecture("size overflow".into()))?)?;
        let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(NnError::NonFinite);
        }
        Ok(v)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SrcnnParams> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(NnError::BadMagic { found: magic });
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let arch = Architecture { channels: dims[0], n1: dims[1], n2: dims[2], f1: dims[3], f2: dims[4], f3: dims[5] };
    arch.validate()?;
    let expected = 28 + 8 * (2 * arch.channels + arch.parameter_count());
    if bytes.len() != expected {
        return Err(if bytes.len() < expected {
            NnError::Truncated { expected, found: bytes.len() }
        } else {
            NnError::TrailingBytes(bytes.len() - expected)
        });
    }
    let mean = r.f64s(arch.channels)?;
    let std = r.f64s(arch.channels)?;
    if std.iter().any(|&s| s < STD_FLOOR) {
        return Err(NnError::Architecture("normalization std below floor".into()));
    }
    let mut p = SrcnnParams::zeros(arch);
    p.norm = NormStats::new(mean, std);
    for layer in p.layers.iter_mut() {
        layer.weights = r.f64s(layer.weights.len())?;
        layer.bias = r.f64s(layer.bias.len())?;
    }
    Ok(p)
}

pub fn save_checkpoint(p: &SrcnnParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(p)).map_err(|source| NnError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SrcnnParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| NnError::Io { path: path.display().to_string(), source })?;
    decode_checkpoint(&bytes)
}
