use std::path::Path;

use super::{read_bytes, write_bytes, Reader, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const TENSOR_MAGIC: [u8; 4] = *b"SVT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 1,
    U8 = 2,
    U32 = 3,
}

impl Dtype {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::U8),
            3 => Ok(Dtype::U32),
            c => Err(Error::UnsupportedDtype(c)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::U8(_) => Dtype::U8,
            TensorData::U32(_) => Dtype::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// f32 payloads compare bitwise so that a round trip of NaN payloads is
// still "equal".
impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            (TensorData::U32(a), TensorData::U32(b)) => a == b,
            _ => false,
        }
    }
}

/// A dense n-dimensional tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let t = TensorFile { dims, data };
        t.validate()?;
        Ok(t)
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        TensorFile {
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: TensorData::F32(m.as_slice().to_vec()),
        }
    }

    pub fn element_count(&self) -> Option<u64> {
        self.dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "tensor rank must be in 1..=255, got {}",
                self.dims.len()
            )));
        }
        let count = self
            .element_count()
            .ok_or_else(|| Error::InvalidArgument("tensor element count overflows".into()))?;
        if count != self.data.len() as u64 {
            return Err(Error::DimMismatch(format!(
                "dims {:?} need {count} values, payload has {}",
                self.dims,
                self.data.len()
            )));
        }
        Ok(())
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    /// Interprets a rank-2 f32 tensor as a matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        let values = self
            .as_f32()
            .ok_or_else(|| Error::Malformed("expected an f32 tensor".into()))?;
        match self.dims[..] {
            [r, c] => Matrix::from_vec(r as usize, c as usize, values.to_vec()),
            _ => Err(Error::DimMismatch(format!(
                "expected a rank-2 tensor, got dims {:?}",
                self.dims
            ))),
        }
    }
}

pub fn encode_tensor(t: &TensorFile) -> Result<Vec<u8>> {
    t.validate()?;
    let dtype = t.data.dtype();
    let mut out = Vec::with_capacity(8 + 8 * t.dims.len() + t.data.len() * dtype.size());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(dtype as u8);
    out.push(t.dims.len() as u8);
    out.push(0);
    for &d in &t.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    match &t.data {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => out.extend_from_slice(v),
        TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<TensorFile> {
    let mut r = Reader::new(bytes);
    r.magic(TENSOR_MAGIC)?;
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = Dtype::from_code(r.u8()?)?;
    let ndim = r.u8()? as usize;
    let _pad = r.u8()?;
    if ndim == 0 {
        return Err(Error::Malformed("tensor has zero dimensions".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u64()?);
    }
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| Error::Malformed(format!("dims {dims:?} overflow")))?;
    let payload_len = count
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::Malformed(format!("dims {dims:?} overflow")))?;
    if r.remaining() < payload_len {
        return Err(Error::Truncated {
            expected: payload_len,
            found: r.remaining(),
        });
    }
    if r.remaining() > payload_len {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after payload",
            r.remaining() - payload_len
        )));
    }
    let payload = r.take(payload_len)?;
    let data = match dtype {
        Dtype::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::U8 => TensorData::U8(payload.to_vec()),
        Dtype::U32 => TensorData::U32(
            payload
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(TensorFile { dims, data })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &TensorFile) -> Result<()> {
    let bytes = encode_tensor(t)?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    decode_tensor(&read_bytes(path.as_ref())?)
}
