//! Products against a packed model without materializing the dense weights.
//!
//! [`packed_matmul`] walks the groups in column order, dequantizing each one
//! into an `n × β` scratch block straight from the bitstreams, and folds it
//! into the output. Every output entry is a single `f32` accumulator updated
//! in ascending column order, so the result does not depend on the thread
//! count.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::packfmt::{column_bits, unpack, PackedModel};

fn check_input(pm: &PackedModel, x: &Mat<f32>) -> Result<()> {
    if x.cols() != pm.m as usize {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, model expects {}",
            x.cols(),
            pm.m
        )));
    }
    Ok(())
}

/// Where group `g` lives in the zero and weight streams.
#[derive(Debug, Clone, Copy)]
struct GroupSlot {
    bits: u8,
    zero_pos: usize,
    weight_pos: usize,
}

fn slots(pm: &PackedModel) -> Vec<GroupSlot> {
    let n = pm.n as usize;
    let mut zero_pos = 0;
    (0..pm.groups())
        .map(|g| {
            let bits = pm.group_bits(g);
            let s = GroupSlot {
                bits,
                zero_pos,
                weight_pos: pm.offsets[g] as usize,
            };
            zero_pos += column_bits(n, bits);
            s
        })
        .collect()
}

/// Decode `count` consecutive `bits`-wide values starting at byte-aligned bit `pos`.
fn decode_run(stream: &[u8], pos: usize, bits: u8, count: usize, mut sink: impl FnMut(usize, u32)) {
    debug_assert_eq!(pos % 8, 0);
    let mask = (1u64 << bits) - 1;
    let mut byte = pos / 8;
    let mut buf = 0u64;
    let mut have = 0u32;
    for idx in 0..count {
        while have < bits as u32 {
            buf |= (stream[byte] as u64) << have;
            byte += 1;
            have += 8;
        }
        sink(idx, (buf & mask) as u32);
        buf >>= bits;
        have -= bits as u32;
    }
}

/// Fill `scratch` (row-major `n × β`) with the dequantized group.
fn dequantize_group(
    pm: &PackedModel,
    g: usize,
    slot: GroupSlot,
    zeros: &mut [u32],
    scratch: &mut [f32],
) {
    let (n, beta) = (pm.n as usize, pm.group_size as usize);
    let scales = &pm.scales[g * n..(g + 1) * n];
    let sign = pm.binarized() && slot.bits == 1;
    decode_run(&pm.zeros_stream, slot.zero_pos, slot.bits, n, |i, z| {
        zeros[i] = z
    });
    let col = column_bits(n, slot.bits);
    for j in 0..beta {
        decode_run(
            &pm.weights_stream,
            slot.weight_pos + j * col,
            slot.bits,
            n,
            |i, c| {
                scratch[i * beta + j] = if sign {
                    if c == 1 {
                        scales[i]
                    } else {
                        -scales[i]
                    }
                } else {
                    (c as f32 - zeros[i] as f32) * scales[i]
                };
            },
        );
    }
}

fn matmul_rows(pm: &PackedModel, slots: &[GroupSlot], x: &[f32], out: &mut [f32]) {
    let (n, m, beta) = (pm.n as usize, pm.m as usize, pm.group_size as usize);
    let t = x.len().checked_div(m).unwrap_or(0);
    let mut scratch = vec![0f32; n * beta];
    let mut zeros = vec![0u32; n];
    for (g, &slot) in slots.iter().enumerate() {
        dequantize_group(pm, g, slot, &mut zeros, &mut scratch);
        let c0 = g * beta;
        for r in 0..t {
            let xs = &x[r * m + c0..r * m + c0 + beta];
            let o = &mut out[r * n..(r + 1) * n];
            for (i, acc) in o.iter_mut().enumerate() {
                let wrow = &scratch[i * beta..(i + 1) * beta];
                let mut a = *acc;
                for (&xv, &wv) in xs.iter().zip(wrow) {
                    a += xv * wv;
                }
                *acc = a;
            }
        }
    }
}

/// `x · ŵᵀ` computed group by group from the packed streams.
pub fn packed_matmul(pm: &PackedModel, x: &Mat<f32>) -> Result<Mat<f32>> {
    check_input(pm, x)?;
    pm.validate()?;
    let (t, n, m) = (x.rows(), pm.n as usize, pm.m as usize);
    let mut out = Mat::zeros(t, n);
    if t == 0 || n == 0 {
        return Ok(out);
    }
    let slots = slots(pm);
    let workers = rayon::current_num_threads().max(1);
    let chunk = t.div_ceil(workers);
    out.as_mut_slice()
        .par_chunks_mut(chunk * n)
        .zip(x.as_slice().par_chunks(chunk * m.max(1)))
        .for_each(|(o, xs)| matmul_rows(pm, &slots, xs, o));
    Ok(out)
}

/// Dense ground truth: unpack, dequantize every group, multiply.
pub fn dense_reference(pm: &PackedModel, x: &Mat<f32>) -> Result<Mat<f32>> {
    check_input(pm, x)?;
    let w_hat = unpack(pm)?.dequantized();
    x.matmul_t(&w_hat)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub t: usize,
    pub n: usize,
    pub m: usize,
    pub repeats: usize,
    pub packed_samples_s: Vec<f64>,
    pub dense_samples_s: Vec<f64>,
    pub packed_median_s: f64,
    pub dense_median_s: f64,
    /// Packed streams and metadata read, plus input and output traffic.
    pub packed_bytes: u64,
    /// `4·n·m` weight bytes plus input and output traffic.
    pub dense_bytes: u64,
}

fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k == 0 {
        0.0
    } else if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// Input plus output bytes of an `f32` product.
pub fn io_bytes(t: usize, n: usize, m: usize) -> u64 {
    4 * (t * m + t * n) as u64
}

pub fn packed_bytes(pm: &PackedModel) -> u64 {
    (pm.bit_codes.len()
        + 8 * pm.offsets.len()
        + 4 * pm.scales.len()
        + pm.zeros_stream.len()
        + pm.weights_stream.len()) as u64
}

/// Time both paths `repeats` times. The dense path multiplies by weights
/// dequantized once up front.
pub fn bench(pm: &PackedModel, x: &Mat<f32>, repeats: usize) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".into()));
    }
    check_input(pm, x)?;
    let (t, n, m) = (x.rows(), pm.n as usize, pm.m as usize);
    let w_hat = unpack(pm)?.dequantized();
    let mut packed_samples_s = Vec::with_capacity(repeats);
    let mut dense_samples_s = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(packed_matmul(pm, x)?);
        packed_samples_s.push(start.elapsed().as_secs_f64());
        let start = Instant::now();
        std::hint::black_box(x.matmul_t(&w_hat)?);
        dense_samples_s.push(start.elapsed().as_secs_f64());
    }
    Ok(BenchReport {
        t,
        n,
        m,
        repeats,
        packed_median_s: median(&packed_samples_s),
        dense_median_s: median(&dense_samples_s),
        packed_samples_s,
        dense_samples_s,
        packed_bytes: packed_bytes(pm) + io_bytes(t, n, m),
        dense_bytes: 4 * (n * m) as u64 + io_bytes(t, n, m),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packfmt::{pack, QuantizedLayer};
    use crate::quant_core::{dequantize, quantize_uniform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(n: usize, beta: usize, bits: &[u8], seed: u64) -> (PackedModel, Mat<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = beta * bits.len();
        let w: Mat<f32> = Mat::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let blocks: Vec<_> = bits
            .iter()
            .enumerate()
            .map(|(g, &b)| quantize_uniform(&w.column_block(g * beta, beta), b, None).unwrap())
            .collect();
        let layer = QuantizedLayer {
            n,
            m,
            group_size: beta,
            avg_bits: 2,
            bits: bits.to_vec(),
            blocks,
        };
        let deq = layer.dequantized();
        (pack(&layer).unwrap(), deq)
    }

    #[test]
    fn identity_probe_recovers_weights() {
        let (pm, deq) = model(5, 8, &[1, 3, 2, 4], 1);
        let y = packed_matmul(&pm, &Mat::identity(32)).unwrap();
        assert_eq!(y, deq.transpose());
    }

    #[test]
    fn matches_dense_reference() {
        for seed in 0..10 {
            let (pm, _) = model(13, 16, &[2, 3, 1, 2], seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let x: Mat<f32> = Mat::from_fn(7, 64, |_, _| rng.random_range(-2.0..2.0));
            assert_eq!(
                packed_matmul(&pm, &x).unwrap(),
                dense_reference(&pm, &x).unwrap()
            );
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let block = Mat::<f32>::zeros(4, 8);
        let qb = quantize_uniform(&block, 2, None).unwrap();
        let layer = QuantizedLayer {
            n: 4,
            m: 8,
            group_size: 8,
            avg_bits: 2,
            bits: vec![2],
            blocks: vec![qb],
        };
        let pm = pack(&layer).unwrap();
        let x = Mat::from_fn(3, 8, |i, j| (i + j) as f32);
        assert_eq!(packed_matmul(&pm, &x).unwrap(), Mat::zeros(3, 4));
    }

    #[test]
    fn empty_input_and_shape_errors() {
        let (pm, _) = model(4, 8, &[2, 2], 3);
        let y = packed_matmul(&pm, &Mat::zeros(0, 16)).unwrap();
        assert_eq!(y.shape(), (0, 4));
        assert_eq!(
            dense_reference(&pm, &Mat::zeros(0, 16)).unwrap().shape(),
            (0, 4)
        );
        assert!(matches!(
            packed_matmul(&pm, &Mat::zeros(2, 15)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn single_group_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w: Mat<f32> = Mat::from_fn(6, 8, |_, _| rng.random_range(-1.0..1.0));
        let qb = quantize_uniform(&w, 3, None).unwrap();
        let expect = dequantize(&qb);
        let layer = QuantizedLayer {
            n: 6,
            m: 8,
            group_size: 8,
            avg_bits: 3,
            bits: vec![3],
            blocks: vec![qb],
        };
        let pm = pack(&layer).unwrap();
        let x: Mat<f32> = Mat::from_fn(2, 8, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(
            packed_matmul(&pm, &x).unwrap(),
            x.matmul_t(&expect).unwrap()
        );
    }

    #[test]
    fn linear_in_input() {
        let (pm, _) = model(8, 16, &[2, 2], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Mat<f32> = Mat::from_fn(3, 32, |_, _| rng.random_range(-1.0..1.0));
        let b: Mat<f32> = Mat::from_fn(3, 32, |_, _| rng.random_range(-1.0..1.0));
        let combo = Mat::from_fn(3, 32, |i, j| 2.0 * a[(i, j)] - 0.5 * b[(i, j)]);
        let (fa, fb, fc) = (
            packed_matmul(&pm, &a).unwrap(),
            packed_matmul(&pm, &b).unwrap(),
            packed_matmul(&pm, &combo).unwrap(),
        );
        for i in 0..3 {
            for j in 0..8 {
                let lin = 2.0 * fa[(i, j)] - 0.5 * fb[(i, j)];
                assert!((fc[(i, j)] - lin).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn bench_accounting() {
        let (pm, _) = model(64, 128, &[2, 3, 1, 2], 7);
        let x = Mat::from_fn(2, 512, |i, j| (i * j % 7) as f32);
        let r = bench(&pm, &x, 1).unwrap();
        assert_eq!(r.packed_samples_s.len(), 1);
        assert_eq!(r.dense_samples_s.len(), 1);
        assert_eq!(r.dense_bytes, 4 * 64 * 512 + 4 * (2 * 512 + 2 * 64));
        assert!(r.packed_bytes < r.dense_bytes);
        assert!(bench(&pm, &x, 0).is_err());
    }
}
