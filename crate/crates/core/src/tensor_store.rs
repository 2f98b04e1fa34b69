//! SLMT container: dense 32-bit float tensors and calibration batches.
//!
//! Layout (little-endian): `"SLMT"`, version `u16` (= 1), ndim `u8`,
//! one reserved byte (= 0), `ndim` extents as `u64`, then the row-major
//! `f32` payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"SLMT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::ShapeMismatch(format!("{} dimensions", dims.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(i));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix<T: Scalar>(m: &Mat<T>) -> Result<Self> {
        let data = m.as_slice().iter().map(|v| v.as_f64() as f32).collect();
        Self::new(vec![m.rows(), m.cols()], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// View a 2-D tensor (or a 1-D one as a single row) as a matrix.
    pub fn to_matrix<T: Scalar>(&self) -> Result<Mat<T>> {
        let (r, c) = match self.dims.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            d => {
                return Err(Error::ShapeMismatch(format!(
                    "expected a 1-D or 2-D tensor, got dims {d:?}"
                )))
            }
        };
        Mat::from_vec(r, c, self.data.iter().map(|&v| T::of(v as f64)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dims.len() as u8);
        out.push(0);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::TruncatedPayload {
                expected: 8,
                found: bytes.len(),
            });
        }
        let found: [u8; 4] = bytes[0..4].try_into().unwrap();
        if found != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let ndim = bytes[6] as usize;
        if bytes[7] != 0 {
            return Err(Error::BadHeader(format!(
                "reserved byte is {:#04x}",
                bytes[7]
            )));
        }
        let header_len = 8 + 8 * ndim;
        if bytes.len() < header_len {
            return Err(Error::TruncatedPayload {
                expected: header_len,
                found: bytes.len(),
            });
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut count: usize = 1;
        for chunk in bytes[8..header_len].chunks_exact(8) {
            let d = u64::from_le_bytes(chunk.try_into().unwrap());
            let d = usize::try_from(d)
                .map_err(|_| Error::BadHeader(format!("extent {d} overflows")))?;
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::BadHeader("element count overflows".into()))?;
            dims.push(d);
        }
        let payload_len = count
            .checked_mul(4)
            .ok_or_else(|| Error::BadHeader("payload size overflows".into()))?;
        let payload = &bytes[header_len..];
        if payload.len() < payload_len {
            return Err(Error::TruncatedPayload {
                expected: payload_len,
                found: payload.len(),
            });
        }
        if payload.len() > payload_len {
            return Err(Error::TrailingBytes(payload.len() - payload_len));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(i));
        }
        Ok(Self { dims, data })
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DenseTensor> {
    DenseTensor::from_bytes(&fs::read(path)?)
}

pub fn write_tensor(t: &DenseTensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, t.to_bytes())?;
    Ok(())
}

/// Batch of token-activation samples, each `tokens × channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    samples: Vec<DenseTensor>,
    channels: usize,
    token_count: usize,
}

impl CalibrationSet {
    pub fn new(samples: Vec<DenseTensor>) -> Result<Self> {
        let mut channels = None;
        let mut token_count = 0;
        for s in &samples {
            let (t, m) = match s.dims() {
                [t, m] => (*t, *m),
                d => {
                    return Err(Error::ShapeMismatch(format!(
                        "calibration samples must be 2-D, got {d:?}"
                    )))
                }
            };
            match channels {
                None => channels = Some(m),
                Some(c) if c != m => {
                    return Err(Error::ShapeMismatch(format!(
                        "calibration samples disagree on channel count ({c} vs {m})"
                    )))
                }
                _ => {}
            }
            token_count += t;
        }
        Ok(Self {
            samples,
            channels: channels.unwrap_or(0),
            token_count,
        })
    }

    pub fn from_matrix<T: Scalar>(tokens: &Mat<T>) -> Result<Self> {
        Self::new(vec![DenseTensor::from_matrix(tokens)?])
    }

    /// A 2-D tensor is one sample; a 3-D `[samples, tokens, channels]` tensor is split.
    pub fn from_tensor(t: DenseTensor) -> Result<Self> {
        match *t.dims() {
            [_, _] => Self::new(vec![t]),
            [s, tk, m] => {
                let per = tk * m;
                let samples = (0..s)
                    .map(|i| {
                        DenseTensor::new(vec![tk, m], t.data()[i * per..(i + 1) * per].to_vec())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::new(samples)
            }
            ref d => Err(Error::ShapeMismatch(format!(
                "calibration tensor must be 2-D or 3-D, got {d:?}"
            ))),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor(read_tensor(path)?)
    }

    pub fn samples(&self) -> &[DenseTensor] {
        &self.samples
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn is_empty(&self) -> bool {
        self.token_count == 0
    }

    /// All tokens stacked into one `T × m` matrix.
    pub fn tokens<T: Scalar>(&self) -> Mat<T> {
        let data = self
            .samples
            .iter()
            .flat_map(|s| s.data().iter().map(|&v| T::of(v as f64)))
            .collect();
        Mat::from_vec(self.token_count, self.channels, data).expect("consistent by construction")
    }
}
