//! DVHD1 parameter checkpoints: `"DVHD1"`, a u32 little-endian header length,
//! a JSON header, then the named tensors as concatenated DFT1 blobs.

use std::path::Path;

use dualpath_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::dft::{self, FormatError};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"DVHD1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of the DFT1 blob, relative to the end of the header.
    offset: usize,
    length: usize,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let blobs: Vec<Vec<u8>> = self.tensors.iter().map(|(_, t)| dft::encode_tensor(t)).collect();
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .zip(&blobs)
            .map(|((name, t), blob)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    length: blob.len(),
                };
                offset += blob.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            version: VERSION,
            config: self.config.clone(),
            tensors: entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(9 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&u32::try_from(header.len()).expect("header under 4 GiB").to_le_bytes());
        out.extend_from_slice(&header);
        blobs.iter().for_each(|b| out.extend_from_slice(b));
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        if bytes.len() < 5 || &bytes[..5] != MAGIC {
            return Err(FormatError::BadMagic);
        }
        if bytes.len() < 9 {
            return Err(FormatError::Truncated {
                expected: 9,
                found: bytes.len(),
            });
        }
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let body_start = 9 + header_len;
        if bytes.len() < body_start {
            return Err(FormatError::Truncated {
                expected: body_start,
                found: bytes.len(),
            });
        }
        let header: Header = serde_json::from_slice(&bytes[9..body_start])
            .map_err(|e| FormatError::Header(e.to_string()))?;
        if header.version != VERSION {
            return Err(FormatError::Header(format!("unsupported version {}", header.version)));
        }
        let body = &bytes[body_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0;
        for e in header.tensors {
            if e.offset != expected_offset {
                return Err(FormatError::Header(format!("tensor {} has a gap or overlap", e.name)));
            }
            let end = e.offset.checked_add(e.length).filter(|&end| end <= body.len()).ok_or(
                FormatError::Truncated {
                    expected: body_start + e.offset + e.length,
                    found: bytes.len(),
                },
            )?;
            let t = dft::decode(&body[e.offset..end])?.into_tensor()?;
            if t.shape() != e.shape.as_slice() {
                return Err(FormatError::Header(format!("tensor {} shape disagrees with header", e.name)));
            }
            tensors.push((e.name, t));
            expected_offset = end;
        }
        if expected_offset != body.len() {
            return Err(FormatError::TrailingBytes(body.len() - expected_offset));
        }
        Ok(Checkpoint {
            config: header.config,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::decode(&bytes)?)
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: serde_json::json!({"k": 2, "lr": 0.1}),
            tensors: vec![
                ("a.weight".into(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1)),
                ("a.bias".into(), Tensor::from_fn(&[3], |i| -(i as f64))),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.encode();
        assert_eq!(&bytes[..5], b"DVHD1");
        let back = Checkpoint::decode(&bytes).unwrap();
        assert!(back.bit_eq(&c));
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = sample().encode();
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
        assert_eq!(Checkpoint::decode(b"DVHD2xxxx"), Err(FormatError::BadMagic));
    }
}
