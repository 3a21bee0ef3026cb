//! DFT1 tensor files: `"DFT1"`, dtype u8, ndim u8, ndim x u64 dims, then a
//! little-endian row-major payload.

use std::path::Path;

use dualpath_tensor::Tensor;
use thiserror::Error;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DFT1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,

    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("dtype mismatch: expected {expected:?}, found {found:?}")]
    DtypeMismatch { expected: DType, found: DType },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("invalid dims {0:?}")]
    InvalidDims(Vec<u64>),

    #[error("invalid header: {0}")]
    Header(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> std::result::Result<Self, FormatError> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            c => Err(FormatError::UnknownDtype(c)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DftData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// A decoded DFT1 array of either dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct DftArray {
    pub shape: Vec<usize>,
    pub data: DftData,
}

impl DftArray {
    pub fn dtype(&self) -> DType {
        match self.data {
            DftData::F32(_) => DType::F32,
            DftData::F64(_) => DType::F64,
        }
    }

    pub fn into_tensor(self) -> std::result::Result<Tensor, FormatError> {
        match self.data {
            DftData::F64(v) => Ok(Tensor::new(&self.shape, v).expect("validated on decode")),
            DftData::F32(_) => Err(FormatError::DtypeMismatch {
                expected: DType::F64,
                found: DType::F32,
            }),
        }
    }

    /// Bitwise equality of shape, dtype and payload.
    pub fn bit_eq(&self, other: &DftArray) -> bool {
        self.shape == other.shape
            && match (&self.data, &other.data) {
                (DftData::F32(a), DftData::F32(b)) => {
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                (DftData::F64(a), DftData::F64(b)) => {
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                _ => false,
            }
    }
}

impl From<&Tensor> for DftArray {
    fn from(t: &Tensor) -> Self {
        DftArray {
            shape: t.shape().to_vec(),
            data: DftData::F64(t.to_vec()),
        }
    }
}

pub fn encode(array: &DftArray) -> Vec<u8> {
    let n: usize = array.shape.iter().product();
    let mut out = Vec::with_capacity(6 + 8 * array.shape.len() + n * array.dtype().size());
    out.extend_from_slice(MAGIC);
    out.push(array.dtype().code());
    out.push(u8::try_from(array.shape.len()).expect("at most 255 dims"));
    for &d in &array.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &array.data {
        DftData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        DftData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    encode(&DftArray::from(t))
}

/// Parses the fixed header; returns dtype, shape and header length.
pub fn decode_header(bytes: &[u8]) -> std::result::Result<(DType, Vec<usize>, usize), FormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(FormatError::Truncated {
            expected: 6,
            found: bytes.len(),
        });
    }
    let dtype = DType::from_code(bytes[4])?;
    let ndim = bytes[5] as usize;
    let header = 6 + 8 * ndim;
    if bytes.len() < header {
        return Err(FormatError::Truncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<u64> = bytes[6..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let valid = dims.iter().all(|&d| d > 0)
        && dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
            .and_then(|n| n.checked_mul(dtype.size()))
            .is_some();
    if !valid {
        return Err(FormatError::InvalidDims(dims));
    }
    Ok((dtype, dims.into_iter().map(|d| d as usize).collect(), header))
}

pub fn decode(bytes: &[u8]) -> std::result::Result<DftArray, FormatError> {
    let (dtype, shape, header) = decode_header(bytes)?;
    let n: usize = shape.iter().product();
    let expected = header + n * dtype.size();
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes(bytes.len() - expected));
    }
    let payload = &bytes[header..];
    let data = match dtype {
        DType::F32 => DftData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        DType::F64 => DftData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ),
    };
    Ok(DftArray { shape, data })
}

pub fn write_dft_array(path: &Path, array: &DftArray) -> Result<()> {
    std::fs::write(path, encode(array)).map_err(|e| Error::io(path, e))
}

pub fn write_dft(path: &Path, t: &Tensor) -> Result<()> {
    write_dft_array(path, &DftArray::from(t))
}

pub fn read_dft_array(path: &Path) -> Result<DftArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

/// Reads an f64 tensor; f32 files are a dtype mismatch.
pub fn read_dft(path: &Path) -> Result<Tensor> {
    Ok(read_dft_array(path)?.into_tensor()?)
}

/// Reads only the header, for cheap shape validation.
pub fn read_dft_header(path: &Path) -> Result<(DType, Vec<usize>)> {
    use std::io::Read;
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = vec![0u8; 6];
    file.read_exact(&mut head).map_err(|_| FormatError::Truncated {
        expected: 6,
        found: 0,
    })?;
    if &head[..4] != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    let ndim = head[5] as usize;
    head.resize(6 + 8 * ndim, 0);
    file.read_exact(&mut head[6..])
        .map_err(|_| FormatError::Truncated {
            expected: 6 + 8 * ndim,
            found: 6,
        })?;
    let (dtype, shape, _) = decode_header(&head)?;
    Ok((dtype, shape))
}
