//! Salience-weighted quantizer calibration.
//!
//! A scalar `γ` stretches each row's quantization range,
//! `Δ = γ(w_max − w_min)/(2^N − 1)` and `z = −round(γ·w_min/Δ)`, and the
//! `γ` minimizing salient-plus-unsalient squared error over the block wins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::quant_core::{
    check_bits, dequantize_value, max_code, quantize_value, quantize_with, range_params, row_range,
    GroupQuantParams, QuantizedBlock,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqcConfig {
    /// Half-width of the `γ` interval around 1.
    pub lambda: f64,
    /// The interval is cut into `2 · steps` evenly spaced candidates.
    pub steps: usize,
    pub include_unity: bool,
    /// Search `γ` independently for every row instead of once per block.
    pub per_row_gamma: bool,
}

impl Default for SqcConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            steps: 50,
            include_unity: true,
            per_row_gamma: false,
        }
    }
}

impl SqcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma lambda {} must lie in (0, 1)",
                self.lambda
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("gamma steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Candidate `γ` values: `2n` points on `[1 − λ, 1 + λ]` (endpoints
    /// included), then `1.0` when `include_unity` is set.
    pub fn candidates(&self) -> Vec<f64> {
        let count = 2 * self.steps;
        let lo = 1.0 - self.lambda;
        let span = 2.0 * self.lambda;
        let mut out: Vec<f64> = (0..count)
            .map(|i| {
                if count == 1 {
                    lo
                } else {
                    lo + span * i as f64 / (count - 1) as f64
                }
            })
            .collect();
        if self.include_unity && !out.contains(&1.0) {
            out.push(1.0);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqcOutcome<T> {
    pub block: QuantizedBlock<T>,
    /// Chosen `γ`; the mean of `row_gammas` in per-row mode.
    pub gamma: T,
    pub row_gammas: Vec<T>,
    pub salient_loss: T,
    pub unsalient_loss: T,
}

impl<T: Scalar> SqcOutcome<T> {
    pub fn loss(&self) -> T {
        self.salient_loss + self.unsalient_loss
    }
}

/// Salient and unsalient squared error of quantizing `row` with `(scale, zero)`.
fn row_losses<T: Scalar>(row: &[T], mask: &[bool], scale: T, zero: u32, qmax: u32) -> (T, T) {
    let mut salient = T::zero();
    let mut unsalient = T::zero();
    for (&w, &m) in row.iter().zip(mask) {
        let d = w - dequantize_value(quantize_value(w, scale, zero, qmax), scale, zero);
        if m {
            salient += d * d;
        } else {
            unsalient += d * d;
        }
    }
    (salient, unsalient)
}

fn sum_pairs<T: Scalar>(pairs: &[(T, T)]) -> (T, T) {
    pairs
        .iter()
        .fold((T::zero(), T::zero()), |(a, b), &(s, u)| (a + s, b + u))
}

/// Salient and unsalient squared error of `block` under explicit affine parameters,
/// accumulated exactly as the calibration search does.
pub fn objective<T: Scalar>(
    block: &Mat<T>,
    mask: &[bool],
    params: &GroupQuantParams<T>,
) -> Result<(T, T)> {
    let (n, beta) = block.shape();
    if mask.len() != n * beta || params.rows() != n {
        return Err(Error::ShapeMismatch(
            "mask or parameters do not match the block".into(),
        ));
    }
    let qmax = max_code(params.bit_width);
    let per_row: Vec<(T, T)> = (0..n)
        .map(|i| {
            row_losses(
                block.row(i),
                &mask[i * beta..(i + 1) * beta],
                params.scale[i],
                params.zero[i],
                qmax,
            )
        })
        .collect();
    Ok(sum_pairs(&per_row))
}

/// Strictly better: lower loss, then `γ` closer to 1, then smaller `γ`.
fn better(loss: f64, gamma: f64, best_loss: f64, best_gamma: f64) -> bool {
    if loss != best_loss {
        return loss < best_loss;
    }
    let (d, bd) = ((gamma - 1.0).abs(), (best_gamma - 1.0).abs());
    if d != bd {
        return d < bd;
    }
    gamma < best_gamma
}

pub fn calibrate_group<T: Scalar>(
    block: &Mat<T>,
    bits: u8,
    mask: &[bool],
    cfg: &SqcConfig,
) -> Result<SqcOutcome<T>> {
    check_bits(bits)?;
    cfg.validate()?;
    let (n, beta) = block.shape();
    if mask.len() != n * beta {
        return Err(Error::ShapeMismatch(format!(
            "mask has {} entries for a {n}x{beta} block",
            mask.len()
        )));
    }
    let qmax = max_code(bits);
    let ranges: Vec<(T, T)> = (0..n).map(|i| row_range(block.row(i))).collect();
    let candidates = cfg.candidates();

    // losses[c][i] = (salient, unsalient) for candidate c on row i
    let losses: Vec<Vec<(T, T)>> = candidates
        .iter()
        .map(|&g| {
            let gamma = T::of(g);
            (0..n)
                .map(|i| {
                    let (s, z) = range_params(ranges[i].0, ranges[i].1, bits, gamma);
                    row_losses(block.row(i), &mask[i * beta..(i + 1) * beta], s, z, qmax)
                })
                .collect()
        })
        .collect();

    let row_choice: Vec<usize> = if cfg.per_row_gamma {
        (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..candidates.len() {
                    let l = losses[c][i].0 + losses[c][i].1;
                    let bl = losses[best][i].0 + losses[best][i].1;
                    if better(l.as_f64(), candidates[c], bl.as_f64(), candidates[best]) {
                        best = c;
                    }
                }
                best
            })
            .collect()
    } else {
        let total = |c: usize| -> T {
            let (s, u) = sum_pairs(&losses[c]);
            s + u
        };
        let mut best = 0;
        let mut best_loss = total(0);
        for c in 1..candidates.len() {
            let l = total(c);
            if better(
                l.as_f64(),
                candidates[c],
                best_loss.as_f64(),
                candidates[best],
            ) {
                best = c;
                best_loss = l;
            }
        }
        vec![best; n]
    };

    let mut scale = Vec::with_capacity(n);
    let mut zero = Vec::with_capacity(n);
    let mut row_gammas = Vec::with_capacity(n);
    let mut chosen = Vec::with_capacity(n);
    for (i, &c) in row_choice.iter().enumerate() {
        let gamma = T::of(candidates[c]);
        let (s, z) = range_params(ranges[i].0, ranges[i].1, bits, gamma);
        scale.push(s);
        zero.push(z);
        row_gammas.push(gamma);
        chosen.push(losses[c][i]);
    }
    let (salient_loss, unsalient_loss) = sum_pairs(&chosen);
    let gamma = if cfg.per_row_gamma {
        if n == 0 {
            T::one()
        } else {
            row_gammas.iter().copied().sum::<T>() / T::of(n as f64)
        }
    } else {
        row_choice
            .first()
            .map_or(T::one(), |&c| T::of(candidates[c]))
    };
    let params = GroupQuantParams {
        bit_width: bits,
        scale,
        zero,
    };
    Ok(SqcOutcome {
        block: quantize_with(block, params),
        gamma,
        row_gammas,
        salient_loss,
        unsalient_loss,
    })
}
