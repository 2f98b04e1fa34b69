//! Seeded synthetic fixtures: weights, calibration activations with injected
//! structure, and random quantized layers for format tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::matrix::Mat;
use crate::packfmt::QuantizedLayer;
use crate::quant_core::{max_code, Encoding, GroupQuantParams, QuantizedBlock};
use crate::sba::candidate_bits;

/// Lower bound of the channel-cluster boost used by the default fixtures.
pub const CLUSTER_SCALE: f64 = 4.0;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// `t × m` standard-normal activations whose column `channel` is scaled by `magnitude`.
pub fn outlier_activations(
    t: usize,
    m: usize,
    channel: usize,
    magnitude: f64,
    rng: &mut impl Rng,
) -> Mat<f64> {
    let mut x = gaussian(t, m, 1.0, rng);
    for i in 0..t {
        x[(i, channel)] *= magnitude;
    }
    x
}

/// Channel-clustered activations: `clusters` separated runs of 2–5 adjacent
/// channels, each multiplied by a factor drawn from `[scale, 2·scale)`.
/// `m` must leave room for the runs. Returns the activations and the boosted
/// channel indices in ascending order.
pub fn clustered_activations(
    t: usize,
    m: usize,
    clusters: usize,
    scale: f64,
    rng: &mut impl Rng,
) -> (Mat<f64>, Vec<usize>) {
    let mut x = gaussian(t, m, 1.0, rng);
    let mut boosted: Vec<usize> = Vec::new();
    let mut runs = 0;
    while runs < clusters {
        let len = rng.random_range(2..=5usize).min(m);
        let start = rng.random_range(0..=m - len);
        // a gap of at least one channel keeps runs distinct
        if (start..start + len).any(|c| boosted.iter().any(|b| b.abs_diff(c) <= 1)) {
            continue;
        }
        let factor = rng.random_range(scale..2.0 * scale);
        for c in start..start + len {
            for i in 0..t {
                x[(i, c)] *= factor;
            }
            boosted.push(c);
        }
        runs += 1;
    }
    boosted.sort_unstable();
    (x, boosted)
}

/// A random balanced plan: `p` groups at `target − 1`, `p` at `target + 1`.
pub fn random_plan(k: usize, target: u8, rng: &mut impl Rng) -> Vec<u8> {
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let p = rng.random_range(0..=k / 2);
    candidate_bits(&order, p, target)
}

/// Random codes, scales and zero points laid out on a balanced plan around `target`.
/// With `binarize`, 1-bit groups use sign encoding.
pub fn random_layer(
    n: usize,
    m: usize,
    group_size: usize,
    target: u8,
    binarize: bool,
    rng: &mut impl Rng,
) -> QuantizedLayer<f32> {
    let k = m / group_size;
    let bits = random_plan(k, target, rng);
    let blocks = bits
        .iter()
        .map(|&b| {
            let qmax = max_code(b);
            let sign = binarize && b == 1;
            let codes = (0..n * group_size)
                .map(|_| rng.random_range(0..=qmax) as u8)
                .collect();
            let params = GroupQuantParams {
                bit_width: b,
                scale: (0..n).map(|_| rng.random_range(1e-3f32..1.0)).collect(),
                zero: (0..n)
                    .map(|_| if sign { 0 } else { rng.random_range(0..=qmax) })
                    .collect(),
            };
            let enc = if sign {
                Encoding::Sign
            } else {
                Encoding::Affine
            };
            QuantizedBlock::new(n, group_size, codes, params, enc).expect("valid random block")
        })
        .collect();
    QuantizedLayer {
        n,
        m,
        group_size,
        avg_bits: target,
        bits,
        blocks,
    }
}
