//! `CTEN` binary tensor files.
//!
//! Layout, all little-endian:
//! - magic `b"CTEN"`
//! - `u8` version (1)
//! - `u8` dtype (0 = f32, 1 = f64)
//! - `u8` rank
//! - `u32` dims[rank]
//! - row-major payload

use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const CTEN_MAGIC: &[u8; 4] = b"CTEN";
pub const CTEN_VERSION: u8 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

/// Serialises at the working precision.
pub fn encode_cten(t: &Tensor) -> Vec<u8> {
    let width = std::mem::size_of::<Real>();
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + width * t.numel());
    out.extend_from_slice(CTEN_MAGIC);
    out.push(CTEN_VERSION);
    out.push(if width == 4 { DTYPE_F32 } else { DTYPE_F64 });
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses either dtype, converting to the working precision.
pub fn decode_cten(bytes: &[u8]) -> Result<Tensor> {
    let bad = |msg: String| Error::Data(format!("invalid CTEN: {msg}"));
    if bytes.len() < 7 || &bytes[..4] != CTEN_MAGIC {
        return Err(bad("missing magic".into()));
    }
    if bytes[4] != CTEN_VERSION {
        return Err(Error::Version(format!("CTEN version {} (expected {CTEN_VERSION})", bytes[4])));
    }
    let dtype = bytes[5];
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let payload = &bytes[header..];
    let data: Vec<Real> = match dtype {
        DTYPE_F32 if payload.len() == 4 * numel => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect(),
        DTYPE_F64 if payload.len() == 8 * numel => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect(),
        DTYPE_F32 | DTYPE_F64 => {
            return Err(bad(format!("payload of {} bytes for shape {shape:?}", payload.len())))
        }
        other => return Err(bad(format!("unknown dtype {other}"))),
    };
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn write_cten(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_cten(t)).map_err(|e| Error::io(path, e))
}

pub fn read_cten(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cten(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
