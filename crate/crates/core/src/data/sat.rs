//! SAT1 tensor container: `"SAT1"`, dtype byte (0 = f32, 1 = u8), rank byte,
//! `rank` little-endian u32 dims, then the little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

const MAGIC: &[u8; 4] = b"SAT1";

#[derive(Debug, Clone, PartialEq)]
pub enum SatData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SatTensor {
    pub dims: Vec<usize>,
    pub data: SatData,
}

impl SatTensor {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Self {
        SatTensor {
            dims,
            data: SatData::F32(data),
        }
    }

    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Self {
        SatTensor {
            dims,
            data: SatData::U8(data),
        }
    }

    pub fn from_tensor(t: &Tensor4<f32>) -> Self {
        SatTensor::f32(t.shape().dims().to_vec(), t.data().to_vec())
    }

    /// Converts a rank-4 f32 record back into a tensor.
    pub fn into_tensor(self) -> Result<Tensor4<f32>> {
        match (self.dims.as_slice(), self.data) {
            (&[n, c, h, w], SatData::F32(d)) => Tensor4::new(Shape4::new(n, c, h, w), d),
            (dims, _) => Err(Error::Data(format!("expected a rank-4 f32 tensor, got dims {dims:?}"))),
        }
    }

    pub fn into_u8(self) -> Result<Vec<u8>> {
        match self.data {
            SatData::U8(d) => Ok(d),
            SatData::F32(_) => Err(Error::Data("expected a u8 tensor, got f32".into())),
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let len = match &self.data {
            SatData::F32(d) => d.len(),
            SatData::U8(d) => d.len(),
        };
        if len != self.numel() || self.dims.len() > u8::MAX as usize {
            return Err(Error::Data(format!("{len} values do not fill dims {:?}", self.dims)));
        }
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + 4 * len);
        out.extend_from_slice(MAGIC);
        out.push(match self.data {
            SatData::F32(_) => 0,
            SatData::U8(_) => 1,
        });
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::Data(format!("dim {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            SatData::F32(d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            SatData::U8(d) => out.extend_from_slice(d),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, msg: &str| Error::Format {
            offset,
            msg: msg.to_string(),
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(err(0, "bad magic, expected SAT1"));
        }
        let dtype = *bytes.get(4).ok_or_else(|| err(4, "missing dtype"))?;
        let elem = match dtype {
            0 => 4,
            1 => 1,
            _ => return Err(err(4, &format!("unknown dtype {dtype}"))),
        };
        let rank = *bytes.get(5).ok_or_else(|| err(5, "missing rank"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            let at = 6 + 4 * i;
            let b = bytes.get(at..at + 4).ok_or_else(|| err(bytes.len(), "truncated dims"))?;
            dims.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
        }
        let start = 6 + 4 * rank;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| err(6, "dims overflow"))?;
        let payload = &bytes[start..];
        if payload.len() != numel * elem {
            let at = start + payload.len().min(numel * elem);
            return Err(err(
                at,
                &format!("payload has {} bytes, dims {dims:?} need {}", payload.len(), numel * elem),
            ));
        }
        let data = if dtype == 0 {
            SatData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else {
            SatData::U8(payload.to_vec())
        };
        Ok(SatTensor { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
