//! Group-wise uniform affine quantizer and sign binarizer.
//!
//! A block is an `n × β` slice of a weight matrix. Every row of the block
//! carries its own scale `Δ` and zero point `z`; codes are
//! `clamp(round(w / Δ) + z, 0, 2^N − 1)` and dequantize to `(code − z) · Δ`.
//! Ranges are widened to include zero before deriving `Δ` and `z`, which
//! keeps `z` inside the code range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::scalar::Scalar;

pub const MIN_BITS: u8 = 1;
pub const MAX_BITS: u8 = 4;

/// Scale stored for an all-zero row under sign encoding (representable in `f32`).
const ZERO_ROW_ALPHA: f64 = 1e-30;

/// How 1-bit groups are represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OneBitMode {
    /// Two-level affine grid, same as every other width.
    #[default]
    Affine,
    /// `sign(w) · α` with `α` the mean absolute value of the row.
    Binarize,
}

/// Code-to-value map of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Encoding {
    #[default]
    Affine,
    /// 1-bit sign codes: `0 → −α`, `1 → +α`.
    Sign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupQuantParams<T> {
    pub bit_width: u8,
    pub scale: Vec<T>,
    pub zero: Vec<u32>,
}

impl<T: Scalar> GroupQuantParams<T> {
    pub fn rows(&self) -> usize {
        self.scale.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bit_width)?;
        if self.scale.len() != self.zero.len() {
            return Err(Error::ShapeMismatch("scale and zero lengths differ".into()));
        }
        let qmax = max_code(self.bit_width);
        for (i, (&s, &z)) in self.scale.iter().zip(&self.zero).enumerate() {
            if !s.is_finite() || s <= T::zero() {
                return Err(Error::InvalidConfig(format!(
                    "row {i}: scale {s} is not positive"
                )));
            }
            if z > qmax {
                return Err(Error::CodeOutOfRange(format!("row {i}: zero {z} > {qmax}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock<T> {
    rows: usize,
    cols: usize,
    /// Row-major `rows × cols` integer codes.
    pub codes: Vec<u8>,
    pub params: GroupQuantParams<T>,
    pub encoding: Encoding,
}

impl<T: Scalar> QuantizedBlock<T> {
    pub fn new(
        rows: usize,
        cols: usize,
        codes: Vec<u8>,
        params: GroupQuantParams<T>,
        encoding: Encoding,
    ) -> Result<Self> {
        if codes.len() != rows * cols || params.rows() != rows {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} block with {} codes and {} parameter rows",
                codes.len(),
                params.rows()
            )));
        }
        if encoding == Encoding::Sign && params.bit_width != 1 {
            return Err(Error::InvalidConfig(
                "sign encoding requires 1-bit width".into(),
            ));
        }
        let qmax = max_code(params.bit_width);
        if let Some(c) = codes.iter().find(|&&c| c as u32 > qmax) {
            return Err(Error::CodeOutOfRange(format!("code {c} exceeds {qmax}")));
        }
        Ok(Self {
            rows,
            cols,
            codes,
            params,
            encoding,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bit_width(&self) -> u8 {
        self.params.bit_width
    }

    #[inline]
    pub fn code(&self, i: usize, j: usize) -> u8 {
        self.codes[i * self.cols + j]
    }

    /// Round every scale through `f32`, the precision the packed format stores.
    pub fn round_scales_to_f32(&mut self) {
        for s in &mut self.params.scale {
            *s = T::of(s.as_f64() as f32 as f64);
        }
    }

    pub fn cast<U: Scalar>(&self) -> QuantizedBlock<U> {
        QuantizedBlock {
            rows: self.rows,
            cols: self.cols,
            codes: self.codes.clone(),
            params: GroupQuantParams {
                bit_width: self.params.bit_width,
                scale: self
                    .params
                    .scale
                    .iter()
                    .map(|s| U::of(s.as_f64()))
                    .collect(),
                zero: self.params.zero.clone(),
            },
            encoding: self.encoding,
        }
    }
}

#[inline]
pub fn max_code(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

pub fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::InvalidConfig(format!(
            "bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

/// Scale and zero point for one row spanning `[lo, hi]`, with the range
/// stretched by `gamma` around the zero point.
pub fn range_params<T: Scalar>(lo: T, hi: T, bits: u8, gamma: T) -> (T, u32) {
    let lo = lo.min(T::zero());
    let hi = hi.max(T::zero());
    if hi == lo {
        // all-zero row: any positive scale reproduces it
        return (T::one(), 0);
    }
    let qmax = max_code(bits);
    let scale = gamma * (hi - lo) / T::of(qmax as f64);
    let z = -(gamma * lo / scale).round_even();
    let z = z.max(T::zero()).min(T::of(qmax as f64));
    (scale, z.to_u32().unwrap_or(0))
}

pub fn row_range<T: Scalar>(row: &[T]) -> (T, T) {
    row.iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Per-row min-max parameters (the uncalibrated quantizer).
pub fn derive_params<T: Scalar>(block: &Mat<T>, bits: u8) -> GroupQuantParams<T> {
    derive_params_scaled(block, bits, T::one())
}

pub fn derive_params_scaled<T: Scalar>(block: &Mat<T>, bits: u8, gamma: T) -> GroupQuantParams<T> {
    let (scale, zero) = (0..block.rows())
        .map(|i| {
            let (lo, hi) = row_range(block.row(i));
            range_params(lo, hi, bits, gamma)
        })
        .unzip();
    GroupQuantParams {
        bit_width: bits,
        scale,
        zero,
    }
}

#[inline]
pub fn quantize_value<T: Scalar>(w: T, scale: T, zero: u32, qmax: u32) -> u8 {
    let q = (w / scale).round_even() + T::of(zero as f64);
    let q = q.max(T::zero()).min(T::of(qmax as f64));
    q.to_u8().unwrap_or(0)
}

#[inline]
pub fn dequantize_value<T: Scalar>(code: u8, scale: T, zero: u32) -> T {
    (T::of(code as f64) - T::of(zero as f64)) * scale
}

/// Quantize a block with explicit or derived per-row parameters.
pub fn quantize_uniform<T: Scalar>(
    block: &Mat<T>,
    bits: u8,
    params: Option<&GroupQuantParams<T>>,
) -> Result<QuantizedBlock<T>> {
    check_bits(bits)?;
    let params = match params {
        Some(p) => {
            if p.bit_width != bits {
                return Err(Error::InvalidConfig(format!(
                    "parameters are for {} bits, asked for {bits}",
                    p.bit_width
                )));
            }
            if p.rows() != block.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "{} parameter rows for a {}-row block",
                    p.rows(),
                    block.rows()
                )));
            }
            p.validate()?;
            p.clone()
        }
        None => derive_params(block, bits),
    };
    Ok(quantize_with(block, params))
}

/// Quantize with parameters already known to be valid for `block`.
pub(crate) fn quantize_with<T: Scalar>(
    block: &Mat<T>,
    params: GroupQuantParams<T>,
) -> QuantizedBlock<T> {
    let qmax = max_code(params.bit_width);
    let mut codes = Vec::with_capacity(block.rows() * block.cols());
    for i in 0..block.rows() {
        let (s, z) = (params.scale[i], params.zero[i]);
        codes.extend(block.row(i).iter().map(|&w| quantize_value(w, s, z, qmax)));
    }
    QuantizedBlock {
        rows: block.rows(),
        cols: block.cols(),
        codes,
        params,
        encoding: Encoding::Affine,
    }
}

pub fn dequantize<T: Scalar>(qb: &QuantizedBlock<T>) -> Mat<T> {
    let mut out = Mat::zeros(qb.rows, qb.cols);
    for i in 0..qb.rows {
        let (s, z) = (qb.params.scale[i], qb.params.zero[i]);
        let codes = &qb.codes[i * qb.cols..(i + 1) * qb.cols];
        match qb.encoding {
            Encoding::Affine => {
                for (o, &c) in out.row_mut(i).iter_mut().zip(codes) {
                    *o = dequantize_value(c, s, z);
                }
            }
            Encoding::Sign => {
                for (o, &c) in out.row_mut(i).iter_mut().zip(codes) {
                    *o = if c == 1 { s } else { -s };
                }
            }
        }
    }
    out
}

/// Sign binarization of a whole block: signs (with `sign(0) = +1`) and the
/// mean absolute value `α`.
pub fn binarize<T: Scalar>(block: &Mat<T>) -> (Vec<i8>, T) {
    let signs = block
        .as_slice()
        .iter()
        .map(|&w| if w >= T::zero() { 1 } else { -1 })
        .collect();
    let l = block.as_slice().len();
    let alpha = if l == 0 {
        T::zero()
    } else {
        block.as_slice().iter().map(|w| w.abs()).sum::<T>() / T::of(l as f64)
    };
    (signs, alpha)
}

/// Binarize each row independently into a 1-bit sign-encoded block.
pub fn binarize_rows<T: Scalar>(block: &Mat<T>) -> QuantizedBlock<T> {
    let mut codes = Vec::with_capacity(block.rows() * block.cols());
    let mut scale = Vec::with_capacity(block.rows());
    for i in 0..block.rows() {
        let row = Mat::from_vec(1, block.cols(), block.row(i).to_vec()).expect("row shape");
        let (signs, alpha) = binarize(&row);
        codes.extend(signs.iter().map(|&s| u8::from(s > 0)));
        // a zero row still needs a positive scale; its signs are all +1
        scale.push(if alpha > T::zero() {
            alpha
        } else {
            T::of(ZERO_ROW_ALPHA)
        });
    }
    QuantizedBlock {
        rows: block.rows(),
        cols: block.cols(),
        codes,
        params: GroupQuantParams {
            bit_width: 1,
            scale,
            zero: vec![0; block.rows()],
        },
        encoding: Encoding::Sign,
    }
}

/// Plain quantizer for a given width: min-max affine, or row binarization
/// for 1-bit groups in [`OneBitMode::Binarize`].
pub fn quantize_plain<T: Scalar>(
    block: &Mat<T>,
    bits: u8,
    mode: OneBitMode,
) -> Result<QuantizedBlock<T>> {
    if bits == 1 && mode == OneBitMode::Binarize {
        return Ok(binarize_rows(block));
    }
    quantize_uniform(block, bits, None)
}

/// Quantize then dequantize.
pub fn fake_quantize<T: Scalar>(block: &Mat<T>, bits: u8, mode: OneBitMode) -> Result<Mat<T>> {
    Ok(dequantize(&quantize_plain(block, bits, mode)?))
}

/// Sum of squared element differences.
pub fn block_mse<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<T> {
    a.check_same_shape(b)?;
    Ok(sse(a.as_slice(), b.as_slice()))
}

#[inline]
pub(crate) fn sse<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}
