//! Salience-determined bit allocation.
//!
//! Groups are ranked by mean salience. For each candidate `p` the `p` least
//! salient groups drop to `N − 1` bits and the `p` most salient rise to
//! `N + 1`, which keeps the average at exactly `N`. The candidate whose
//! fake-quantized layer output is closest to the original output in KL
//! divergence wins.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::quant_core::{fake_quantize, OneBitMode};
use crate::salience::{check_group_size, SalienceMap};
use crate::scalar::Scalar;

/// Turns raw layer outputs into distributions for the KL objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlConfig {
    pub temperature: f64,
    pub epsilon: f64,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            epsilon: 1e-8,
        }
    }
}

impl KlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "kl temperature {} must be finite and > 0",
                self.temperature
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::InvalidConfig(format!(
                "kl epsilon {} must lie in (0, 1e-3]",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SbaConfig {
    pub kl: KlConfig,
    /// Token rows kept (uniform stride) for the search.
    pub max_tokens: usize,
    pub one_bit: OneBitMode,
}

impl Default for SbaConfig {
    fn default() -> Self {
        Self {
            kl: KlConfig::default(),
            max_tokens: 4096,
            one_bit: OneBitMode::Affine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BitPlan<T> {
    pub bits: Vec<u8>,
    pub p_star: usize,
    /// Search error for every `p` in `0..=k/2`; empty when no search ran.
    pub kl_curve: Vec<T>,
    /// Number of candidate plans whose KL was evaluated.
    pub evaluations: usize,
}

impl<T: Scalar> BitPlan<T> {
    pub fn uniform(groups: usize, bits: u8) -> Self {
        Self {
            bits: vec![bits; groups],
            p_star: 0,
            kl_curve: Vec::new(),
            evaluations: 0,
        }
    }

    pub fn groups(&self) -> usize {
        self.bits.len()
    }

    pub fn mean_bits(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().map(|&b| b as f64).sum::<f64>() / self.bits.len() as f64
    }

    /// Group count per bit width, indexed by width (`0..=4`).
    pub fn histogram(&self) -> [usize; 5] {
        let mut h = [0; 5];
        for &b in &self.bits {
            h[b as usize] += 1;
        }
        h
    }
}

/// Row-wise softmax with temperature, floored at `epsilon` and renormalized.
fn floored_softmax<T: Scalar>(row: &[T], cfg: &KlConfig) -> Vec<T> {
    let inv_t = T::one() / T::of(cfg.temperature);
    let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v * inv_t));
    let mut p: Vec<T> = row.iter().map(|&v| (v * inv_t - max).exp()).collect();
    let sum: T = p.iter().copied().sum();
    let eps = T::of(cfg.epsilon);
    for v in &mut p {
        *v = (*v / sum).max(eps);
    }
    let sum: T = p.iter().copied().sum();
    for v in &mut p {
        *v /= sum;
    }
    p
}

/// Mean over rows of `KL(softmax(y) ‖ softmax(ŷ))`.
pub fn kl_between_outputs<T: Scalar>(y: &Mat<T>, y_hat: &Mat<T>, cfg: &KlConfig) -> Result<T> {
    y.check_same_shape(y_hat)?;
    if y.rows() == 0 || y.cols() == 0 {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for r in 0..y.rows() {
        let p = floored_softmax(y.row(r), cfg);
        let q = floored_softmax(y_hat.row(r), cfg);
        for (&pi, &qi) in p.iter().zip(&q) {
            total += pi * (pi / qi).ln();
        }
    }
    Ok(total / T::of(y.rows() as f64))
}

/// KL divergence between the outputs `x·wᵀ` and `x·ŵᵀ`.
pub fn output_kl<T: Scalar>(x: &Mat<T>, w: &Mat<T>, w_hat: &Mat<T>, cfg: &KlConfig) -> Result<T> {
    w.check_same_shape(w_hat)?;
    let y = x.matmul_t(w)?;
    let y_hat = x.matmul_t(w_hat)?;
    kl_between_outputs(&y, &y_hat, cfg)
}

/// Keep at most `max_rows` rows, taken at a uniform stride.
pub fn subsample_rows<T: Scalar>(x: &Mat<T>, max_rows: usize) -> Mat<T> {
    let t = x.rows();
    if max_rows == 0 || t <= max_rows {
        return x.clone();
    }
    let idx: Vec<usize> = (0..max_rows).map(|i| i * t / max_rows).collect();
    x.select_rows(&idx)
}

/// Group indices from least to most salient; equal salience ranks the lower index as less salient.
pub fn salience_order<T: Scalar>(group_mean: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..group_mean.len()).collect();
    order.sort_by(|&a, &b| {
        group_mean[a]
            .partial_cmp(&group_mean[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Bit widths for candidate `p` given a salience order.
pub fn candidate_bits(order: &[usize], p: usize, target: u8) -> Vec<u8> {
    let k = order.len();
    let mut bits = vec![target; k];
    for &g in &order[..p] {
        bits[g] = target - 1;
    }
    for &g in &order[k - p..] {
        bits[g] = target + 1;
    }
    bits
}

pub fn allocate_bits<T: Scalar>(
    w: &Mat<T>,
    x: &Mat<T>,
    sal: &SalienceMap<T>,
    group_size: usize,
    target_bits: u8,
    cfg: &SbaConfig,
) -> Result<BitPlan<T>> {
    let (n, m) = w.shape();
    check_group_size(m, group_size)?;
    if !(2..=3).contains(&target_bits) {
        return Err(Error::InvalidConfig(format!(
            "average bit width {target_bits} must be 2 or 3"
        )));
    }
    cfg.kl.validate()?;
    if sal.delta.shape() != (n, m) || sal.group_size != group_size {
        return Err(Error::ShapeMismatch(
            "salience map does not match weights and group size".into(),
        ));
    }
    if x.cols() != m {
        return Err(Error::ShapeMismatch(format!(
            "activations have {} channels, weights have {m}",
            x.cols()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::InsufficientCalibration);
    }
    let k = m / group_size;
    let xs = subsample_rows(x, cfg.max_tokens);
    let y = xs.matmul_t(w)?;
    let order = salience_order(&sal.group_mean);

    // fake-quantized group at N-1, N, N+1, indexed [g][width - (N-1)]
    let blocks: Vec<Mat<T>> = (0..k)
        .map(|g| w.column_block(g * group_size, group_size))
        .collect();
    let cache: Vec<[Mat<T>; 3]> = blocks
        .par_iter()
        .map(|b| -> Result<[Mat<T>; 3]> {
            Ok([
                fake_quantize(b, target_bits - 1, cfg.one_bit)?,
                fake_quantize(b, target_bits, cfg.one_bit)?,
                fake_quantize(b, target_bits + 1, cfg.one_bit)?,
            ])
        })
        .collect::<Result<_>>()?;

    let kl_curve: Vec<T> = (0..=k / 2)
        .into_par_iter()
        .map(|p| {
            let bits = candidate_bits(&order, p, target_bits);
            let mut w_hat = Mat::zeros(n, m);
            for (g, &b) in bits.iter().enumerate() {
                w_hat.set_column_block(g * group_size, &cache[g][(b + 1 - target_bits) as usize]);
            }
            let y_hat = xs.matmul_t(&w_hat)?;
            kl_between_outputs(&y, &y_hat, &cfg.kl)
        })
        .collect::<Result<_>>()?;

    if kl_curve.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteIntermediate {
            stage: "bit-allocation search".into(),
        });
    }
    let mut p_star = 0;
    for (p, &e) in kl_curve.iter().enumerate() {
        if e < kl_curve[p_star] {
            p_star = p;
        }
    }
    Ok(BitPlan {
        bits: candidate_bits(&order, p_star, target_bits),
        p_star,
        evaluations: kl_curve.len(),
        kl_curve,
    })
}
