//! The `PAET` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | field                                   |
//! |--------------|-----------------------------------------|
//! | 0..4         | magic `PAET`                            |
//! | 4..6         | version, u16 (currently 1)              |
//! | 6            | dtype code, u8 (0 = f32, 1 = f64)        |
//! | 7            | rank, u8                                |
//! | 8..8+4*rank  | dims, u32 each                          |
//! | rest         | row-major payload                       |

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{ArrayD, IxDyn};

use crate::error::{PaeError, Result};

pub const MAGIC: &[u8; 4] = b"PAET";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    F32,
    F64,
}

impl ElementType {
    pub fn code(self) -> u8 {
        match self {
            ElementType::F32 => 0,
            ElementType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ElementType::F32),
            1 => Ok(ElementType::F64),
            other => Err(PaeError::Format(format!(
                "unknown dtype code {other} at offset 6"
            ))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            ElementType::F32 => 4,
            ElementType::F64 => 8,
        }
    }
}

/// A host-side tensor as stored on disk. Values are held as `f64`; an `F32`
/// tensor only ever holds values that are exactly representable in `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub dtype: ElementType,
    pub values: Vec<f64>,
}

impl StoredTensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::with_dtype(dims, values, ElementType::F64)
    }

    pub fn f32(dims: Vec<usize>, values: &[f32]) -> Result<Self> {
        Self::with_dtype(
            dims,
            values.iter().map(|&v| v as f64).collect(),
            ElementType::F32,
        )
    }

    pub fn with_dtype(dims: Vec<usize>, values: Vec<f64>, dtype: ElementType) -> Result<Self> {
        let count: usize = dims.iter().product();
        if count != values.len() {
            return Err(PaeError::Format(format!(
                "dims {dims:?} describe {count} elements but {} values were given",
                values.len()
            )));
        }
        let values = match dtype {
            ElementType::F32 => values.into_iter().map(|v| v as f32 as f64).collect(),
            ElementType::F64 => values,
        };
        Ok(Self { dims, dtype, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn from_array(array: &ArrayD<f64>) -> Self {
        Self {
            dims: array.shape().to_vec(),
            dtype: ElementType::F64,
            values: array.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<ArrayD<f64>> {
        ArrayD::from_shape_vec(IxDyn(&self.dims), self.values.clone())
            .map_err(|e| PaeError::Format(e.to_string()))
    }

    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        let dims = tensor.dims().to_vec();
        let dtype = match tensor.dtype() {
            DType::F32 => ElementType::F32,
            _ => ElementType::F64,
        };
        let values = tensor
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Ok(Self { dims, dtype, values })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_vec(self.values.clone(), self.dims.as_slice(), device)?;
        Ok(match self.dtype {
            ElementType::F32 => t.to_dtype(DType::F32)?,
            ElementType::F64 => t,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.dims.len() > u8::MAX as usize {
            return Err(PaeError::Format(format!("rank {} exceeds 255", self.dims.len())));
        }
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + self.len() * self.dtype.size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            let d = u32::try_from(d)
                .map_err(|_| PaeError::Format(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match self.dtype {
            ElementType::F32 => {
                for &v in &self.values {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            ElementType::F64 => {
                for &v in &self.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(PaeError::Format(format!(
                "truncated header: expected at least 8 bytes, found {}",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(PaeError::Format(format!(
                "bad magic at offset 0: expected {:?}, found {:?}",
                String::from_utf8_lossy(MAGIC),
                String::from_utf8_lossy(&bytes[0..4])
            )));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(PaeError::Format(format!(
                "unsupported version {version} at offset 4"
            )));
        }
        let dtype = ElementType::from_code(bytes[6])?;
        let rank = bytes[7] as usize;
        let header = 8 + 4 * rank;
        if bytes.len() < header {
            return Err(PaeError::Format(format!(
                "truncated header: expected {header} bytes, found {}",
                bytes.len()
            )));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|i| {
                let o = 8 + 4 * i;
                u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
            })
            .collect();
        let count: usize = dims.iter().product();
        let expected = count * dtype.size();
        let payload = &bytes[header..];
        if payload.len() != expected {
            return Err(PaeError::Format(format!(
                "truncated payload: expected {expected} bytes, found {}",
                payload.len()
            )));
        }
        let values = match dtype {
            ElementType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            ElementType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        };
        Ok(Self { dims, dtype, values })
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &StoredTensor) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let bytes = tensor.encode()?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<StoredTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        PaeError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    StoredTensor::decode(&bytes)
}
