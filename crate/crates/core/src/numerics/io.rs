//! `.t2d` tensor container.
//!
//! One UTF-8 JSON header line
//! `{"dtype":"f32","rows":R,"cols":C,"byte_order":"little-endian"}\n`
//! followed by `R*C` little-endian `f32` values in row-major order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

pub const TENSOR_EXTENSION: &str = "t2d";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    rows: usize,
    cols: usize,
    byte_order: String,
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor2D) -> Result<()> {
    let header = Header {
        dtype: "f32".into(),
        rows: t.rows(),
        cols: t.cols(),
        byte_order: "little-endian".into(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: R) -> Result<Tensor2D> {
    let mut reader = BufReader::new(r);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("missing header line terminator".into()));
    }
    line.pop();
    let header: Header = serde_json::from_slice(&line)
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.byte_order != "little-endian" {
        return Err(Error::Format(format!(
            "unsupported byte order {:?}",
            header.byte_order
        )));
    }
    let expected = header
        .rows
        .checked_mul(header.cols)
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != expected * 4 {
        return Err(Error::LengthMismatch {
            expected,
            found: payload.len() / 4,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor2D::new(header.rows, header.cols, data)
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_tensor(path: &Path, t: &Tensor2D) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    write_atomic(path, &buf)
}

pub fn load_tensor(path: &Path) -> Result<Tensor2D> {
    read_tensor(fs::File::open(path)?)
}
