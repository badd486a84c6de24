//! Binary matrix container shared by patch features, image features and class
//! embedding tables.
//!
//! Layout (little-endian): magic `VGSF`, version byte `0x01`, `u32` row count,
//! `u32` dimension, `rows * dim` `f32` values in row-major order, then one JSON
//! object per line describing each row.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VGSF";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 4 + 1 + 4 + 4;

/// Serialize `values` (widened to `f64` in memory) and their row descriptors.
pub fn encode<T: Serialize>(rows: &[T], values: &Array2<f64>) -> Result<Vec<u8>> {
    let (n, dim) = values.dim();
    if rows.len() != n {
        return Err(Error::DimMismatch {
            expected: n,
            actual: rows.len(),
        });
    }
    let n32 = u32::try_from(n).map_err(|_| Error::InvalidArgument("too many rows".into()))?;
    let d32 = u32::try_from(dim).map_err(|_| Error::InvalidArgument("dimension too large".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + n * dim * 4 + n * 32);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for v in values.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|e| Error::Internal(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Parse a container. Row descriptors are returned in file order.
pub fn decode<T: DeserializeOwned>(bytes: &[u8], origin: &Path) -> Result<(Vec<T>, Array2<f64>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "magic {:?} is not {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            std::str::from_utf8(MAGIC).unwrap()
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {:#04x}", bytes[4])));
    }
    let n = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let payload = n
        .checked_mul(dim)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    let available = bytes.len() - HEADER_LEN;
    if available < payload {
        return Err(Error::Truncated {
            expected: payload,
            actual: available,
        });
    }
    let values: Vec<f64> = bytes[HEADER_LEN..HEADER_LEN + payload]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let values = Array2::from_shape_vec((n, dim), values).map_err(|e| Error::Internal(e.to_string()))?;

    let trailer = std::str::from_utf8(&bytes[HEADER_LEN + payload..]).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        line: 0,
        message: format!("row trailer is not UTF-8: {e}"),
    })?;
    let mut rows = Vec::with_capacity(n);
    for (line_no, line) in trailer.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: line_no + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    if rows.len() != n {
        return Err(Error::Format(format!(
            "header declares {n} rows but trailer lists {}",
            rows.len()
        )));
    }
    Ok((rows, values))
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, Array2<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write<T: Serialize>(path: &Path, rows: &[T], values: &Array2<f64>) -> Result<()> {
    let bytes = encode(rows, values)?;
    write_bytes(path, &bytes)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
