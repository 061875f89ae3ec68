//! Binary matrix files: an 8-byte header (rows, cols as little-endian u32)
//! followed by row-major little-endian f64 entries.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{DrfError, Result};

pub fn encode_matrix(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.nrows())
        .map_err(|_| DrfError::Dimension(format!("{} rows exceed u32", m.nrows())))?;
    let cols = u32::try_from(m.ncols())
        .map_err(|_| DrfError::Dimension(format!("{} cols exceed u32", m.ncols())))?;
    let mut buf = Vec::with_capacity(8 + 8 * m.len());
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_matrix(bytes: &[u8], origin: &str) -> Result<DMatrix<f64>> {
    let bad = |detail: String| DrfError::Format {
        path: origin.to_string(),
        detail,
    };
    if bytes.len() < 8 {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + 8 * rows * cols;
    if bytes.len() != expected {
        return Err(bad(format!(
            "header says {rows}x{cols} ({expected} bytes) but file has {} bytes",
            bytes.len()
        )));
    }
    let body = &bytes[8..];
    Ok(DMatrix::from_fn(rows, cols, |i, j| {
        let at = 8 * (i * cols + j);
        f64::from_le_bytes(body[at..at + 8].try_into().unwrap())
    }))
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_matrix(m)?).map_err(|e| DrfError::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DrfError::io(path, e))?;
    decode_matrix(&bytes, &path.display().to_string())
}
