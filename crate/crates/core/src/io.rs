//! `.tsr` raw tensor files and 8-bit PGM export.
//!
//! A `.tsr` file is one JSON header line
//! `{"dims":[N,C,H,W],"dtype":"f64","byte_order":"little"}` terminated by
//! `\n`, followed by the flat little-endian payload in (N,C,H,W) order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor};

#[derive(Debug, Serialize, Deserialize)]
struct TsrHeader {
    dims: Dims,
    dtype: String,
    byte_order: String,
}

pub fn encode_tsr<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let header = TsrHeader {
        dims: t.dims(),
        dtype: T::DTYPE.to_string(),
        byte_order: "little".to_string(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(t.len() * T::BYTES);
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes a `.tsr` payload, converting from the stored dtype to `T`.
pub fn decode_tsr<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("tsr: missing header line".into()))?;
    let header: TsrHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.byte_order != "little" {
        return Err(Error::Format(format!(
            "tsr: unsupported byte order {}",
            header.byte_order
        )));
    }
    let payload = &bytes[nl + 1..];
    let data: Vec<T> = match header.dtype.as_str() {
        "f64" => decode_payload::<f64>(payload)?
            .into_iter()
            .map(|v| T::from_f64(v))
            .collect(),
        "f32" => decode_payload::<f32>(payload)?
            .into_iter()
            .map(|v| T::from_f64(v as f64))
            .collect(),
        other => return Err(Error::Format(format!("tsr: unsupported dtype {other}"))),
    };
    Tensor::from_vec(header.dims, data)
}

fn decode_payload<U: Real>(payload: &[u8]) -> Result<Vec<U>> {
    if !payload.len().is_multiple_of(U::BYTES) {
        return Err(Error::Format(
            "tsr: payload length is not a multiple of the element size".into(),
        ));
    }
    Ok(payload.chunks_exact(U::BYTES).map(U::read_le).collect())
}

pub fn write_tsr<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_tsr(t))?;
    Ok(())
}

pub fn read_tsr<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_tsr(&fs::read(path)?)
}

/// Binary PGM (P5) of `|values|` normalized so the largest magnitude maps to 255.
pub fn encode_pgm(values: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::Shape(format!(
            "pgm: {} values for a {height}x{width} image",
            values.len()
        )));
    }
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = Vec::with_capacity(values.len() + 20);
    write!(out, "P5\n{width} {height}\n255\n")?;
    for &v in values {
        let level = if max > 0.0 {
            (v.abs() / max * 255.0).round()
        } else {
            0.0
        };
        out.push(level.clamp(0.0, 255.0) as u8);
    }
    Ok(out)
}

pub fn write_pgm(
    path: impl AsRef<Path>,
    values: &[f64],
    height: usize,
    width: usize,
) -> Result<()> {
    fs::write(path, encode_pgm(values, height, width)?)?;
    Ok(())
}
