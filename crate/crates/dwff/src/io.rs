//! The DWF1 binary tensor container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "DWF1"
//! dtype   u8       0 = float32, 1 = uint8, 2 = float64
//! ndim    u8
//! dims    ndim × u64
//! payload row-major values
//! ```
//!
//! Feature and label files use float32 / uint8 storage; float64 exists for
//! checkpoint payloads, where parameter values must survive a round-trip
//! without rounding.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DWF1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("bad magic: expected \"DWF1\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated file: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: &'static str, found: &'static str },
    #[error("rank mismatch: expected {expected} dims, found {found}")]
    RankMismatch { expected: usize, found: usize },
    #[error("refusing to write non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("declared dims {0:?} overflow")]
    DimsOverflow(Vec<u64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    U8 = 1,
    F64 = 2,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self, FormatError> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::U8),
            2 => Ok(Dtype::F64),
            other => Err(FormatError::UnknownDtype(other)),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "float32",
            Dtype::U8 => "uint8",
            Dtype::F64 => "float64",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
            Dtype::F64 => 8,
        }
    }
}

fn header(dtype: Dtype, shape: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * shape.len());
    out.extend_from_slice(&MAGIC);
    out.push(dtype as u8);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out
}

/// Serializes a tensor as float32 payload.
pub fn encode_tensor_f32(t: &Tensor) -> Result<Vec<u8>, FormatError> {
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite(i));
    }
    let mut out = header(Dtype::F32, t.shape());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Serializes a tensor as float64 payload (checkpoint fidelity).
pub fn encode_tensor_f64(t: &Tensor) -> Result<Vec<u8>, FormatError> {
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite(i));
    }
    let mut out = header(Dtype::F64, t.shape());
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Serializes a label grid as uint8 payload.
pub fn encode_labels(shape: &[usize], ids: &[u8]) -> Vec<u8> {
    debug_assert_eq!(shape.iter().product::<usize>(), ids.len());
    let mut out = header(Dtype::U8, shape);
    out.extend_from_slice(ids);
    out
}

struct RawHeader {
    dtype: Dtype,
    shape: Vec<usize>,
    payload_start: usize,
    count: usize,
}

fn parse_header(bytes: &[u8]) -> Result<RawHeader, FormatError> {
    if bytes.len() < 6 {
        return Err(FormatError::Truncated { expected: 6, got: bytes.len() });
    }
    let mut found = [0u8; 4];
    found.copy_from_slice(&bytes[0..4]);
    if found != MAGIC {
        return Err(FormatError::BadMagic { found });
    }
    let dtype = Dtype::from_code(bytes[4])?;
    let ndim = bytes[5] as usize;
    let header_len = 6 + 8 * ndim;
    if bytes.len() < header_len {
        return Err(FormatError::Truncated { expected: header_len, got: bytes.len() });
    }
    let mut dims64 = Vec::with_capacity(ndim);
    let mut shape = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for i in 0..ndim {
        let mut raw = [0u8; 8];
        raw.copy_from_slice(&bytes[6 + 8 * i..6 + 8 * (i + 1)]);
        let d = u64::from_le_bytes(raw);
        dims64.push(d);
        let d_usize: usize =
            d.try_into().map_err(|_| FormatError::DimsOverflow(dims64.clone()))?;
        count = count
            .checked_mul(d_usize)
            .ok_or_else(|| FormatError::DimsOverflow(dims64.clone()))?;
        shape.push(d_usize);
    }
    let expected = header_len + count * dtype.width();
    if bytes.len() < expected {
        return Err(FormatError::Truncated { expected, got: bytes.len() });
    }
    Ok(RawHeader { dtype, shape, payload_start: header_len, count })
}

/// Decodes a real-valued tensor (float32 or float64 payload) and returns the
/// tensor plus the number of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, usize), FormatError> {
    let h = parse_header(bytes)?;
    let mut data = Vec::with_capacity(h.count);
    match h.dtype {
        Dtype::F32 => {
            for i in 0..h.count {
                let mut raw = [0u8; 4];
                raw.copy_from_slice(&bytes[h.payload_start + 4 * i..h.payload_start + 4 * (i + 1)]);
                data.push(f32::from_le_bytes(raw) as f64);
            }
        }
        Dtype::F64 => {
            for i in 0..h.count {
                let mut raw = [0u8; 8];
                raw.copy_from_slice(&bytes[h.payload_start + 8 * i..h.payload_start + 8 * (i + 1)]);
                data.push(f64::from_le_bytes(raw));
            }
        }
        Dtype::U8 => {
            return Err(FormatError::DtypeMismatch { expected: "float32/float64", found: "uint8" })
        }
    }
    let consumed = h.payload_start + h.count * h.dtype.width();
    let t = Tensor::new(h.shape, data).map_err(|_| FormatError::DimsOverflow(vec![]))?;
    Ok((t, consumed))
}

/// Decodes a uint8 label grid.
pub fn decode_labels(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>), FormatError> {
    let h = parse_header(bytes)?;
    if h.dtype != Dtype::U8 {
        return Err(FormatError::DtypeMismatch { expected: "uint8", found: h.dtype.name() });
    }
    let ids = bytes[h.payload_start..h.payload_start + h.count].to_vec();
    Ok((h.shape, ids))
}

fn io_err(path: &Path, source: io::Error) -> FormatError {
    FormatError::Io { path: path.display().to_string(), source }
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<(), FormatError> {
    let bytes = encode_tensor_f32(t)?;
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn write_tensor_file_f64(path: &Path, t: &Tensor) -> Result<(), FormatError> {
    let bytes = encode_tensor_f64(t)?;
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor, FormatError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (t, _) = decode_tensor(&bytes)?;
    Ok(t)
}

pub fn write_label_file(path: &Path, shape: &[usize], ids: &[u8]) -> Result<(), FormatError> {
    fs::write(path, encode_labels(shape, ids)).map_err(|e| io_err(path, e))
}

pub fn read_label_file(path: &Path) -> Result<(Vec<usize>, Vec<u8>), FormatError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_labels(&bytes)
}
