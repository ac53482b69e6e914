//! On-disk tensor container format.
//!
//! Layout: magic "SLTC", version u8 (= 1), dtype u8 (1 = f32 LE,
//! 2 = f64 LE, 3 = u8), rank u8, rank x u32 LE extents, then the
//! row-major little-endian payload. Parsing is total: trailing bytes,
//! short payloads, and unknown codes are distinct errors.

use std::fs;
use std::path::Path;

use crate::error::{Error, ParseError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SLTC";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
    U8 = 3,
}

impl Dtype {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn element_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            3 => Ok(Dtype::U8),
            other => Err(ParseError::BadDtype(other).into()),
        }
    }
}

/// A decoded container: dims plus dtype-faithful payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerTensor {
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl ContainerTensor {
    pub fn dtype(&self) -> Dtype {
        match self.payload {
            Payload::F32(_) => Dtype::F32,
            Payload::F64(_) => Dtype::F64,
            Payload::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match &self.payload {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_f64(dims: Vec<usize>, data: Vec<f64>) -> Self {
        ContainerTensor {
            dims,
            payload: Payload::F64(data),
        }
    }

    pub fn from_f32(dims: Vec<usize>, data: Vec<f32>) -> Self {
        ContainerTensor {
            dims,
            payload: Payload::F32(data),
        }
    }

    pub fn from_u8(dims: Vec<usize>, data: Vec<u8>) -> Self {
        ContainerTensor {
            dims,
            payload: Payload::U8(data),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        ContainerTensor::from_f64(t.dims().to_vec(), t.data().to_vec())
    }

    /// Widens any payload to an f64 tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data: Vec<f64> = match &self.payload {
            Payload::F32(v) => v.iter().map(|x| *x as f64).collect(),
            Payload::F64(v) => v.clone(),
            Payload::U8(v) => v.iter().map(|x| *x as f64).collect(),
        };
        Tensor::new(self.dims.clone(), data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.dtype();
        let mut out = Vec::with_capacity(7 + 4 * self.dims.len() + self.len() * dtype.element_size());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(dtype.code());
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(ParseError::BadMagic.into());
        }
        if bytes.len() < 7 {
            return Err(ParseError::Truncated {
                expected: 7,
                found: bytes.len(),
            }
            .into());
        }
        if bytes[4] != VERSION {
            return Err(ParseError::BadVersion(bytes[4]).into());
        }
        let dtype = Dtype::from_code(bytes[5])?;
        let rank = bytes[6] as usize;
        let header = 7 + 4 * rank;
        if bytes.len() < header {
            return Err(ParseError::Truncated {
                expected: header,
                found: bytes.len(),
            }
            .into());
        }
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            let off = 7 + 4 * i;
            dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
        }
        let count: usize = dims.iter().product();
        let expected = header + count * dtype.element_size();
        if bytes.len() < expected {
            return Err(ParseError::Truncated {
                expected,
                found: bytes.len(),
            }
            .into());
        }
        if bytes.len() > expected {
            return Err(ParseError::TrailingBytes(bytes.len() - expected).into());
        }
        let body = &bytes[header..];
        let payload = match dtype {
            Dtype::F32 => Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => Payload::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U8 => Payload::U8(body.to_vec()),
        };
        Ok(ContainerTensor { dims, payload })
    }
}

pub fn write_container(path: &Path, t: &ContainerTensor) -> Result<()> {
    fs::write(path, t.encode()).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_container(path: &Path) -> Result<ContainerTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    ContainerTensor::decode(&bytes)
}

/// Writes a tensor as a 64-bit container (bitwise round-trip).
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_container(path, &ContainerTensor::from_tensor(t))
}

/// Reads any container back as an f64 tensor.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    read_container(path)?.to_tensor()
}
