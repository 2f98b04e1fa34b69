//! SLMQ: bit-exact storage of a mixed-precision quantized matrix.
//!
//! Groups are stored in column order. Each group carries a 2-bit width code
//! (`width − 1`), one `f32` scale per row, one zero point per row packed at
//! the group's width, and its weight codes packed column by column. Every
//! column (and every group's zero vector) is an LSB-first bitstream padded
//! with zero bits to a 32-bit word boundary. `offsets[g]` is the bit offset
//! of group `g` in the weight stream.
//!
//! File layout, little-endian throughout:
//!
//! ```text
//! "SLMQ" | version u16 | flags u16 | n u32 | m u32 | group_size u32 | avg_bits u8 | 3 reserved
//! then, each prefixed by its byte length as u64:
//!   bit_codes | offsets (u64 each) | scales (f32 each, group-major) | zeros_stream | weights_stream
//! ```

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::pipeline::{assemble, QuantizationResult};
use crate::quant_core::{Encoding, GroupQuantParams, QuantizedBlock, MAX_BITS, MIN_BITS};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"SLMQ";
pub const VERSION: u16 = 1;
/// 1-bit groups use sign encoding.
pub const FLAG_BINARIZE: u16 = 1;
pub const WORD_BITS: usize = 32;
const HEADER_LEN: usize = 24;

/// Bits one column of `n` codes occupies after word padding.
#[inline]
pub fn column_bits(n: usize, bits: u8) -> usize {
    (n * bits as usize).div_ceil(WORD_BITS) * WORD_BITS
}

#[inline]
pub fn group_weight_bits(n: usize, group_size: usize, bits: u8) -> usize {
    group_size * column_bits(n, bits)
}

/// LSB-first bit writer.
#[derive(Debug, Default)]
pub(crate) struct BitWriter {
    bytes: Vec<u8>,
    len: usize,
}

impl BitWriter {
    pub(crate) fn push(&mut self, value: u32, bits: u8) {
        for b in 0..bits as usize {
            if self.len.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if (value >> b) & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 1 << (self.len % 8);
            }
            self.len += 1;
        }
    }

    pub(crate) fn pad_to(&mut self, multiple: usize) {
        while !self.len.is_multiple_of(multiple) {
            self.push(0, 1);
        }
    }

    pub(crate) fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// Read `bits` bits starting at absolute bit position `pos`, LSB-first.
#[inline]
pub(crate) fn read_bits(bytes: &[u8], pos: usize, bits: u8) -> u32 {
    let mut v = 0u32;
    for b in 0..bits as usize {
        let p = pos + b;
        if (bytes[p / 8] >> (p % 8)) & 1 == 1 {
            v |= 1 << b;
        }
    }
    v
}

/// Codes, parameters and plan of one quantized matrix, without metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer<T> {
    pub n: usize,
    pub m: usize,
    pub group_size: usize,
    pub avg_bits: u8,
    pub bits: Vec<u8>,
    pub blocks: Vec<QuantizedBlock<T>>,
}

impl<T: Scalar> QuantizedLayer<T> {
    pub fn from_result(
        res: &QuantizationResult<T>,
        n: usize,
        m: usize,
        group_size: usize,
        avg_bits: u8,
    ) -> Self {
        Self {
            n,
            m,
            group_size,
            avg_bits,
            bits: res.plan.bits.clone(),
            blocks: res.blocks.clone(),
        }
    }

    pub fn groups(&self) -> usize {
        self.bits.len()
    }

    pub fn dequantized(&self) -> Mat<T> {
        if self.blocks.is_empty() {
            return Mat::zeros(self.n, self.m);
        }
        assemble(&self.blocks)
    }

    pub fn cast<U: Scalar>(&self) -> QuantizedLayer<U> {
        QuantizedLayer {
            n: self.n,
            m: self.m,
            group_size: self.group_size,
            avg_bits: self.avg_bits,
            bits: self.bits.clone(),
            blocks: self.blocks.iter().map(QuantizedBlock::cast).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    pub n: u32,
    pub m: u32,
    pub group_size: u32,
    pub avg_bits: u8,
    pub flags: u16,
    pub bit_codes: Vec<u8>,
    pub offsets: Vec<u64>,
    pub scales: Vec<f32>,
    pub zeros_stream: Vec<u8>,
    pub weights_stream: Vec<u8>,
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InconsistentPlan(format!("{what} {v} exceeds u32")))
}

pub fn pack<T: Scalar>(layer: &QuantizedLayer<T>) -> Result<PackedModel> {
    let (n, m, beta) = (layer.n, layer.m, layer.group_size);
    if beta == 0 && m != 0 {
        return Err(Error::InconsistentPlan("group size is zero".into()));
    }
    let k = if m == 0 { 0 } else { m / beta };
    if k * beta != m {
        return Err(Error::InconsistentPlan(format!(
            "group size {beta} does not divide {m}"
        )));
    }
    if layer.bits.len() != k || layer.blocks.len() != k {
        return Err(Error::InconsistentPlan(format!(
            "{k} groups expected, plan has {} and there are {} blocks",
            layer.bits.len(),
            layer.blocks.len()
        )));
    }
    let binarized = layer.blocks.iter().any(|b| b.encoding == Encoding::Sign);
    for (g, (qb, &b)) in layer.blocks.iter().zip(&layer.bits).enumerate() {
        if !(MIN_BITS..=MAX_BITS).contains(&b) || qb.bit_width() != b {
            return Err(Error::InconsistentPlan(format!(
                "group {g}: plan says {b} bits, block has {}",
                qb.bit_width()
            )));
        }
        if qb.rows() != n || qb.cols() != beta || qb.params.rows() != n {
            return Err(Error::InconsistentPlan(format!(
                "group {g}: block is not {n}x{beta}"
            )));
        }
        qb.params.validate()?;
        if b == 1 && binarized != (qb.encoding == Encoding::Sign) {
            return Err(Error::InconsistentPlan(
                "1-bit groups mix sign and affine encodings".into(),
            ));
        }
        if qb.encoding == Encoding::Sign && qb.params.zero.iter().any(|&z| z != 0) {
            return Err(Error::InconsistentPlan(format!(
                "group {g}: sign-encoded group has a zero point"
            )));
        }
    }

    let mut codes = BitWriter::default();
    for &b in &layer.bits {
        codes.push((b - 1) as u32, 2);
    }

    let mut offsets = Vec::with_capacity(k + 1);
    let mut scales = Vec::with_capacity(k * n);
    let mut zeros = BitWriter::default();
    let mut weights = BitWriter::default();
    offsets.push(0u64);
    for (qb, &b) in layer.blocks.iter().zip(&layer.bits) {
        scales.extend(qb.params.scale.iter().map(|s| s.as_f64() as f32));
        for &z in &qb.params.zero {
            zeros.push(z, b);
        }
        zeros.pad_to(WORD_BITS);
        for j in 0..beta {
            for i in 0..n {
                weights.push(qb.code(i, j) as u32, b);
            }
            weights.pad_to(WORD_BITS);
        }
        offsets.push(weights.len as u64);
    }
    if let Some(i) = scales.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InconsistentPlan(format!(
            "scale {i} does not survive f32 conversion"
        )));
    }

    Ok(PackedModel {
        n: to_u32(n, "row count")?,
        m: to_u32(m, "column count")?,
        group_size: to_u32(beta, "group size")?,
        avg_bits: layer.avg_bits,
        flags: if binarized { FLAG_BINARIZE } else { 0 },
        bit_codes: codes.into_bytes(),
        offsets,
        scales,
        zeros_stream: zeros.into_bytes(),
        weights_stream: weights.into_bytes(),
    })
}

impl PackedModel {
    pub fn groups(&self) -> usize {
        if self.m == 0 || self.group_size == 0 {
            0
        } else {
            (self.m / self.group_size) as usize
        }
    }

    pub fn binarized(&self) -> bool {
        self.flags & FLAG_BINARIZE != 0
    }

    /// Bit width of group `g` decoded from its 2-bit code.
    #[inline]
    pub fn group_bits(&self, g: usize) -> u8 {
        read_bits(&self.bit_codes, 2 * g, 2) as u8 + 1
    }

    pub fn plan_bits(&self) -> Vec<u8> {
        (0..self.groups()).map(|g| self.group_bits(g)).collect()
    }

    /// Structural consistency of every section.
    pub fn validate(&self) -> Result<()> {
        let (n, m, beta) = (self.n as usize, self.m as usize, self.group_size as usize);
        if m != 0 && (beta == 0 || m % beta != 0) {
            return Err(Error::BadGroupSize {
                group_size: beta,
                columns: m,
            });
        }
        if self.flags & !FLAG_BINARIZE != 0 {
            return Err(Error::BadHeader(format!(
                "unknown flags {:#06x}",
                self.flags
            )));
        }
        let k = self.groups();
        if self.bit_codes.len() != (2 * k).div_ceil(8) {
            return Err(Error::CorruptOffsets(format!(
                "bit-code section is {} bytes for {k} groups",
                self.bit_codes.len()
            )));
        }
        for p in 2 * k..8 * self.bit_codes.len() {
            if read_bits(&self.bit_codes, p, 1) != 0 {
                return Err(Error::CodeOutOfRange(
                    "non-zero padding after bit codes".into(),
                ));
            }
        }
        if self.offsets.len() != k + 1 || self.offsets[0] != 0 {
            return Err(Error::CorruptOffsets(format!(
                "expected {} offsets starting at 0, found {}",
                k + 1,
                self.offsets.len()
            )));
        }
        let mut zero_bits = 0usize;
        for g in 0..k {
            let b = self.group_bits(g);
            let span = self.offsets[g + 1].checked_sub(self.offsets[g]);
            if span != Some(group_weight_bits(n, beta, b) as u64) {
                return Err(Error::CorruptOffsets(format!(
                    "group {g} spans {:?} bits, {b}-bit layout needs {}",
                    span,
                    group_weight_bits(n, beta, b)
                )));
            }
            zero_bits += column_bits(n, b);
        }
        if self.offsets[k] != 8 * self.weights_stream.len() as u64 {
            return Err(Error::CorruptOffsets(format!(
                "offsets end at bit {}, weight stream holds {}",
                self.offsets[k],
                8 * self.weights_stream.len()
            )));
        }
        if 8 * self.zeros_stream.len() != zero_bits {
            return Err(Error::CorruptOffsets(format!(
                "zero stream holds {} bits, plan needs {zero_bits}",
                8 * self.zeros_stream.len()
            )));
        }
        if self.scales.len() != k * n {
            return Err(Error::ShapeMismatch(format!(
                "{} scales for {k} groups of {n} rows",
                self.scales.len()
            )));
        }
        if let Some(i) = self
            .scales
            .iter()
            .position(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::NonFiniteValue(i));
        }
        // padding bits and sign-group zeros must be clear
        let mut zpos = 0;
        for g in 0..k {
            let b = self.group_bits(g);
            let used = n * b as usize;
            let col = column_bits(n, b);
            if self.binarized()
                && b == 1
                && (0..n).any(|i| read_bits(&self.zeros_stream, zpos + i, 1) != 0)
            {
                return Err(Error::CodeOutOfRange(format!(
                    "group {g}: sign group with zero point"
                )));
            }
            if (used..col).any(|p| read_bits(&self.zeros_stream, zpos + p, 1) != 0) {
                return Err(Error::CodeOutOfRange(format!(
                    "group {g}: non-zero padding in zeros"
                )));
            }
            zpos += col;
            let base = self.offsets[g] as usize;
            for j in 0..beta {
                let start = base + j * col;
                if (used..col).any(|p| read_bits(&self.weights_stream, start + p, 1) != 0) {
                    return Err(Error::CodeOutOfRange(format!(
                        "group {g} column {j}: non-zero padding"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            HEADER_LEN
                + 40
                + self.bit_codes.len()
                + 8 * self.offsets.len()
                + 4 * self.scales.len()
                + self.zeros_stream.len()
                + self.weights_stream.len(),
        );
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        out.extend_from_slice(&self.m.to_le_bytes());
        out.extend_from_slice(&self.group_size.to_le_bytes());
        out.push(self.avg_bits);
        out.extend_from_slice(&[0, 0, 0]);

        let mut section = |bytes: &[u8]| {
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(bytes);
        };
        section(&self.bit_codes);
        section(
            &self
                .offsets
                .iter()
                .flat_map(|o| o.to_le_bytes())
                .collect::<Vec<_>>(),
        );
        section(
            &self
                .scales
                .iter()
                .flat_map(|s| s.to_le_bytes())
                .collect::<Vec<_>>(),
        );
        section(&self.zeros_stream);
        section(&self.weights_stream);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::TruncatedPayload {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let found: [u8; 4] = bytes[..4].try_into().unwrap();
        if found != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedPayload {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let u16_at = |p: usize| u16::from_le_bytes([bytes[p], bytes[p + 1]]);
        let u32_at = |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let flags = u16_at(6);
        let (n, m, group_size) = (u32_at(8), u32_at(12), u32_at(16));
        let avg_bits = bytes[20];
        if bytes[21..24] != [0, 0, 0] {
            return Err(Error::BadHeader("reserved bytes are not zero".into()));
        }

        let mut pos = HEADER_LEN;
        let mut next = |name: &str| -> Result<&[u8]> {
            if bytes.len() < pos + 8 {
                return Err(Error::TruncatedPayload {
                    expected: pos + 8,
                    found: bytes.len(),
                });
            }
            let len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
            let len = usize::try_from(len)
                .map_err(|_| Error::BadHeader(format!("{name} length {len} overflows")))?;
            let start = pos + 8;
            let end = start.checked_add(len).filter(|&e| e <= bytes.len()).ok_or(
                Error::TruncatedPayload {
                    expected: start.saturating_add(len),
                    found: bytes.len(),
                },
            )?;
            pos = end;
            Ok(&bytes[start..end])
        };
        let bit_codes = next("bit codes")?.to_vec();
        let raw_offsets = next("offsets")?;
        if raw_offsets.len() % 8 != 0 {
            return Err(Error::CorruptOffsets(
                "offset section is not a multiple of 8 bytes".into(),
            ));
        }
        let offsets = raw_offsets
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let raw_scales = next("scales")?;
        if raw_scales.len() % 4 != 0 {
            return Err(Error::BadHeader(
                "scale section is not a multiple of 4 bytes".into(),
            ));
        }
        let scales = raw_scales
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let zeros_stream = next("zeros")?.to_vec();
        let weights_stream = next("weights")?.to_vec();
        if pos != bytes.len() {
            return Err(Error::TrailingBytes(bytes.len() - pos));
        }
        let pm = Self {
            n,
            m,
            group_size,
            avg_bits,
            flags,
            bit_codes,
            offsets,
            scales,
            zeros_stream,
            weights_stream,
        };
        pm.validate()?;
        Ok(pm)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

pub fn unpack(pm: &PackedModel) -> Result<QuantizedLayer<f32>> {
    pm.validate()?;
    let (n, beta) = (pm.n as usize, pm.group_size as usize);
    let k = pm.groups();
    let bits = pm.plan_bits();
    let mut blocks = Vec::with_capacity(k);
    let mut zpos = 0;
    for (g, &b) in bits.iter().enumerate() {
        let col = column_bits(n, b);
        let zero: Vec<u32> = (0..n)
            .map(|i| read_bits(&pm.zeros_stream, zpos + i * b as usize, b))
            .collect();
        zpos += col;
        let base = pm.offsets[g] as usize;
        let mut codes = vec![0u8; n * beta];
        for j in 0..beta {
            let start = base + j * col;
            for i in 0..n {
                codes[i * beta + j] =
                    read_bits(&pm.weights_stream, start + i * b as usize, b) as u8;
            }
        }
        let encoding = if pm.binarized() && b == 1 {
            Encoding::Sign
        } else {
            Encoding::Affine
        };
        let params = GroupQuantParams {
            bit_width: b,
            scale: pm.scales[g * n..(g + 1) * n].to_vec(),
            zero,
        };
        blocks.push(QuantizedBlock::new(n, beta, codes, params, encoding)?);
    }
    Ok(QuantizedLayer {
        n,
        m: pm.m as usize,
        group_size: beta,
        avg_bits: pm.avg_bits,
        bits,
        blocks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeReport {
    /// Weight-code bits before column padding.
    pub weight_bits: u64,
    pub padding_bits: u64,
    /// Header, bit codes, offsets, scales and zeros.
    pub metadata_bits: u64,
    pub bits_total: u64,
    /// `weight_bits / (n · m)`.
    pub bits_per_weight: f64,
    pub bits_per_weight_padded: f64,
}

pub fn packed_size_report(pm: &PackedModel) -> SizeReport {
    let (n, beta) = (pm.n as u64, pm.group_size as u64);
    let weight_bits: u64 = (0..pm.groups())
        .map(|g| n * beta * pm.group_bits(g) as u64)
        .sum();
    let stream_bits = 8 * pm.weights_stream.len() as u64;
    let metadata_bytes = HEADER_LEN
        + 5 * 8
        + pm.bit_codes.len()
        + 8 * pm.offsets.len()
        + 4 * pm.scales.len()
        + pm.zeros_stream.len();
    let metadata_bits = 8 * metadata_bytes as u64;
    let elems = n * pm.m as u64;
    let per = |bits: u64| {
        if elems == 0 {
            0.0
        } else {
            bits as f64 / elems as f64
        }
    };
    SizeReport {
        weight_bits,
        padding_bits: stream_bits.saturating_sub(weight_bits),
        metadata_bits,
        bits_total: stream_bits + metadata_bits,
        bits_per_weight: per(weight_bits),
        bits_per_weight_padded: per(stream_bits),
    }
}
