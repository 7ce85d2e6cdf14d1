//! VSPF: little-endian binary tensor container.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "VSPF"
//! 4       4           version (u32, = 1)
//! 8       1           dtype (1 = f32, 2 = f64)
//! 9       4           ndim (u32)
//! 13      4*ndim      dims (u32 each)
//! ..      n*size      payload, row-major
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::element::Element;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"VSPF";
pub const VERSION: u32 = 1;
/// Largest payload accepted when reading (8 GiB).
pub const MAX_PAYLOAD_BYTES: u64 = 8 << 30;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"VSPF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("header short: need {needed} bytes, file has {actual}")]
    HeaderShort { needed: usize, actual: usize },
    #[error("invalid dims {0:?}")]
    BadDims(Vec<u32>),
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD_BYTES}-byte budget")]
    TooLarge(u64),
    #[error("payload short: expected {expected} bytes, found {actual}")]
    PayloadShort { expected: usize, actual: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("file holds {file} data, cannot load as {requested} without narrowing")]
    DtypeMismatch {
        file: &'static str,
        requested: &'static str,
    },
}

impl FormatError {
    /// Stable machine-readable code for each failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::Io(_) => "io",
            FormatError::BadMagic(_) => "bad-magic",
            FormatError::UnsupportedVersion(_) => "bad-version",
            FormatError::UnknownDtype(_) => "bad-dtype",
            FormatError::HeaderShort { .. } => "header-short",
            FormatError::BadDims(_) => "bad-dims",
            FormatError::TooLarge(_) => "too-large",
            FormatError::PayloadShort { .. } => "payload-short",
            FormatError::TrailingBytes(_) => "trailing-bytes",
            FormatError::DtypeMismatch { .. } => "dtype-mismatch",
        }
    }
}

/// Parsed header of a VSPF buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub dtype: u8,
    pub dims: Vec<usize>,
    pub payload_offset: usize,
}

impl Header {
    pub fn element_size(&self) -> usize {
        match self.dtype {
            1 => 4,
            _ => 8,
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self.dtype {
            1 => "f32",
            _ => "f64",
        }
    }
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * t.rank() + t.len() * T::SIZE);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE_CODE);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn parse_header(bytes: &[u8]) -> Result<Header, FormatError> {
    let need = |needed: usize| {
        if bytes.len() < needed {
            Err(FormatError::HeaderShort {
                needed,
                actual: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(4)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    need(13)?;
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let dtype = bytes[8];
    if dtype != 1 && dtype != 2 {
        return Err(FormatError::UnknownDtype(dtype));
    }
    let ndim = u32_at(bytes, 9) as usize;
    if ndim == 0 || ndim > 8 {
        return Err(FormatError::BadDims(Vec::new()));
    }
    let payload_offset = 13 + 4 * ndim;
    need(payload_offset)?;
    let raw: Vec<u32> = (0..ndim).map(|i| u32_at(bytes, 13 + 4 * i)).collect();
    if raw.contains(&0) {
        return Err(FormatError::BadDims(raw));
    }
    let elem = if dtype == 1 { 4u64 } else { 8 };
    let total = raw
        .iter()
        .try_fold(elem, |acc, &d| acc.checked_mul(d as u64))
        .ok_or(FormatError::TooLarge(u64::MAX))?;
    if total > MAX_PAYLOAD_BYTES {
        return Err(FormatError::TooLarge(total));
    }
    Ok(Header {
        dtype,
        dims: raw.into_iter().map(|d| d as usize).collect(),
        payload_offset,
    })
}

/// Decodes a whole VSPF buffer into a tensor of element type `T`.
///
/// An f32 file may be widened into an f64 tensor; the reverse is rejected.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<Tensor<T>, FormatError> {
    let header = parse_header(bytes)?;
    let count: usize = header.dims.iter().product();
    let expected = count * header.element_size();
    let payload = &bytes[header.payload_offset..];
    if payload.len() < expected {
        return Err(FormatError::PayloadShort {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(FormatError::TrailingBytes(payload.len() - expected));
    }
    let data: Vec<T> = match (header.dtype, T::DTYPE_CODE) {
        (a, b) if a == b => payload.chunks_exact(T::SIZE).map(T::read_le).collect(),
        (1, 2) => payload
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::read_le(c) as f64))
            .collect(),
        _ => {
            return Err(FormatError::DtypeMismatch {
                file: header.dtype_name(),
                requested: T::NAME,
            })
        }
    };
    Tensor::new(&header.dims, data).map_err(|_| FormatError::BadDims(Vec::new()))
}

pub fn save_features<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<(), FormatError> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load_features<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>, FormatError> {
    decode(&fs::read(path)?)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor<f64> {
        Tensor::from_fn(&[2, 3], |i| i as f64 * 0.25 - 1.0).unwrap()
    }

    #[test]
    fn header_layout_is_little_endian() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..4], b"VSPF");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8], 2);
        assert_eq!(&bytes[9..13], &[2, 0, 0, 0]);
        assert_eq!(&bytes[13..17], &[2, 0, 0, 0]);
        assert_eq!(&bytes[17..21], &[3, 0, 0, 0]);
        assert_eq!(bytes.len(), 21 + 6 * 8);
        assert_eq!(&bytes[21..29], &(-1.0f64).to_le_bytes());
    }

    #[test]
    fn distinct_errors() {
        let good = encode(&sample());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(decode::<f64>(&bad).unwrap_err().code(), "bad-magic");
        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(decode::<f64>(&bad).unwrap_err().code(), "bad-version");
        let mut bad = good.clone();
        bad[8] = 9;
        assert_eq!(decode::<f64>(&bad).unwrap_err().code(), "bad-dtype");
        assert_eq!(decode::<f64>(&good[..10]).unwrap_err().code(), "header-short");
        assert_eq!(
            decode::<f64>(&good[..good.len() - 3]).unwrap_err().code(),
            "payload-short"
        );
        let mut long = good.clone();
        long.push(0);
        assert_eq!(decode::<f64>(&long).unwrap_err().code(), "trailing-bytes");
        assert_eq!(decode::<f32>(&good).unwrap_err().code(), "dtype-mismatch");
        let mut zero_dim = good;
        zero_dim[13] = 0;
        assert_eq!(decode::<f64>(&zero_dim).unwrap_err().code(), "bad-dims");
    }

    #[test]
    fn f32_widens_to_f64() {
        let t32: Tensor<f32> = sample().cast();
        let wide: Tensor<f64> = decode(&encode(&t32)).unwrap();
        assert!(wide.bit_eq(&t32.cast()));
    }

    #[test]
    fn oversized_header_rejected_before_allocation() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"VSPF");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(2);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert_eq!(decode::<f64>(&bytes).unwrap_err().code(), "too-large");
    }
}
