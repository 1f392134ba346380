use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SVMX";
pub const MATRIX_VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8 + 8 + 4;

/// Header `SVMX`, version, rows, cols, element width (8), then the
/// little-endian row-major payload.
pub fn save_matrix(path: impl AsRef<Path>, m: &Tensor) -> Result<()> {
    if m.rank() != 2 {
        return invalid(format!("matrix files hold [m, d] data, got {:?}", m.shape()));
    }
    let mut out = Vec::with_capacity(HEADER + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.shape()[0] as u64).to_le_bytes());
    out.extend_from_slice(&(m.shape()[1] as u64).to_le_bytes());
    out.extend_from_slice(&8u32.to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a matrix written by [`save_matrix`]; 4-byte payloads are widened.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<Tensor> {
    parse_matrix(&fs::read(path.as_ref())?)
}

pub fn parse_matrix(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a matrix file".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
    let version = u32_at(4);
    if version != MATRIX_VERSION {
        return Err(Error::Version { found: version, expected: MATRIX_VERSION });
    }
    let (m, d, width) = (u64_at(8) as usize, u64_at(16) as usize, u32_at(24) as usize);
    if width != 4 && width != 8 {
        return Err(Error::Format(format!("unsupported element width {width}")));
    }
    let payload = &bytes[HEADER..];
    let need = m
        .checked_mul(d)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Error::Format("matrix header overflows".into()))?;
    if payload.len() != need {
        return Err(Error::Format(format!(
            "matrix payload length {} does not match header {m}x{d}x{width} = {need}",
            payload.len()
        )));
    }
    let data: Vec<f64> = if width == 8 {
        payload.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
    } else {
        payload.chunks(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))).collect()
    };
    Tensor::new(vec![m, d], data)
}
