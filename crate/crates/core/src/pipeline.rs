//! End-to-end layer quantization: Hessian proxy, salience, bit allocation,
//! per-group calibration and error compensation onto later columns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::quant_core::{
    binarize_rows, dequantize, dequantize_value, max_code, quantize_uniform, quantize_value,
    Encoding, OneBitMode, QuantizedBlock,
};
use crate::salience::{
    check_group_size, damp_and_invert, hessian_from_tokens, salience_map, salient_mask_3sigma,
    HessianState, SalienceDenominator,
};
use crate::sba::{allocate_bits, output_kl, subsample_rows, BitPlan, KlConfig, SbaConfig};
use crate::scalar::Scalar;
use crate::sqc::{calibrate_group, SqcConfig};
use crate::tensor_store::CalibrationSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub group_size: usize,
    /// Target average bit width.
    pub bits: u8,
    pub percdamp: f64,
    pub sba: bool,
    pub sqc: bool,
    pub compensation: bool,
    /// Quantize column by column inside each group, compensating within the group too.
    pub inner_columnwise: bool,
    pub one_bit: OneBitMode,
    pub salience_denominator: SalienceDenominator,
    pub kl: KlConfig,
    pub max_kl_tokens: usize,
    pub sqc_cfg: SqcConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            group_size: 128,
            bits: 2,
            percdamp: 0.01,
            sba: true,
            sqc: true,
            compensation: true,
            inner_columnwise: false,
            one_bit: OneBitMode::Affine,
            salience_denominator: SalienceDenominator::InverseDiagonal,
            kl: KlConfig::default(),
            max_kl_tokens: 4096,
            sqc_cfg: SqcConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Plain round-to-nearest: every refinement switched off.
    pub fn rtn(group_size: usize, bits: u8) -> Self {
        Self {
            group_size,
            bits,
            sba: false,
            sqc: false,
            compensation: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.bits) {
            return Err(Error::InvalidConfig(format!(
                "average bit width {} must be 2 or 3",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(Error::InvalidConfig("group size must be positive".into()));
        }
        if !(self.percdamp.is_finite() && self.percdamp >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "percdamp {} must be >= 0",
                self.percdamp
            )));
        }
        self.kl.validate()?;
        self.sqc_cfg.validate()
    }

    fn sba_config(&self) -> SbaConfig {
        SbaConfig {
            kl: self.kl,
            max_tokens: self.max_kl_tokens,
            one_bit: self.one_bit,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuantizationResult<T> {
    pub plan: BitPlan<T>,
    pub blocks: Vec<QuantizedBlock<T>>,
    pub gammas: Vec<T>,
    /// Fraction of each group's elements selected by the 3σ salience mask.
    pub mask_density: Vec<f64>,
    pub proxy_loss: T,
    /// Mean squared reconstruction error against the original weights.
    pub recon_mse: T,
    pub recon_kl: T,
    pub damp: T,
}

impl<T: Scalar> QuantizationResult<T> {
    /// Dequantized weight matrix.
    pub fn dequantized(&self) -> Mat<T> {
        assemble(&self.blocks)
    }
}

/// Concatenate dequantized column groups.
pub fn assemble<T: Scalar>(blocks: &[QuantizedBlock<T>]) -> Mat<T> {
    let n = blocks.first().map_or(0, |b| b.rows());
    let m: usize = blocks.iter().map(|b| b.cols()).sum();
    let mut out = Mat::zeros(n, m);
    let mut c0 = 0;
    for b in blocks {
        out.set_column_block(c0, &dequantize(b));
        c0 += b.cols();
    }
    out
}

/// Layer loss `tr((ŵ − w) H (ŵ − w)ᵀ)` with the undamped proxy Hessian.
pub fn proxy_loss<T: Scalar>(w: &Mat<T>, w_hat: &Mat<T>, hs: &HessianState<T>) -> Result<T> {
    let d = w_hat.sub(w)?;
    if d.cols() != hs.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{} columns against a {}-dim hessian",
            d.cols(),
            hs.dim()
        )));
    }
    let hd = d.matmul(&hs.h)?;
    let mut total = T::zero();
    for i in 0..d.rows() {
        total += crate::matrix::dot(hd.row(i), d.row(i));
    }
    Ok(total)
}

pub fn quantize_layer<T: Scalar>(
    w: &Mat<T>,
    calib: &CalibrationSet,
    cfg: &PipelineConfig,
) -> Result<QuantizationResult<T>> {
    cfg.validate()?;
    let (n, m) = w.shape();
    check_group_size(m, cfg.group_size)?;
    if !w.all_finite() {
        return Err(Error::NonFiniteIntermediate {
            stage: "input weights".into(),
        });
    }
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if calib.channels() != m {
        return Err(Error::ShapeMismatch(format!(
            "calibration has {} channels, weights have {m}",
            calib.channels()
        )));
    }
    let beta = cfg.group_size;
    let k = m / beta;

    let x = calib.tokens::<T>();
    let hs = damp_and_invert(&hessian_from_tokens(&x)?, T::of(cfg.percdamp))?;
    let sal = salience_map(w, &hs, beta, cfg.salience_denominator)?;
    let plan = if cfg.sba {
        allocate_bits(w, &x, &sal, beta, cfg.bits, &cfg.sba_config())?
    } else {
        BitPlan::uniform(k, cfg.bits)
    };

    let u = &hs.chol_inv;
    let mut work = w.clone();
    let mut blocks = Vec::with_capacity(k);
    let mut gammas = Vec::with_capacity(k);
    let mut mask_density = Vec::with_capacity(k);
    for g in 0..k {
        let c0 = g * beta;
        let bits = plan.bits[g];
        let wb = work.column_block(c0, beta);
        let mask = salient_mask_3sigma(&sal.group_block(g));
        mask_density.push(mask.iter().filter(|&&s| s).count() as f64 / mask.len().max(1) as f64);

        let (mut qb, gamma) = if bits == 1 && cfg.one_bit == OneBitMode::Binarize {
            (binarize_rows(&wb), T::one())
        } else if cfg.sqc {
            let out = calibrate_group(&wb, bits, &mask, &cfg.sqc_cfg)?;
            (out.block, out.gamma)
        } else {
            (quantize_uniform(&wb, bits, None)?, T::one())
        };
        qb.round_scales_to_f32();

        if cfg.compensation {
            let err = if cfg.inner_columnwise {
                let (codes, err) = quantize_columnwise(&mut work, c0, &qb, u);
                qb.codes = codes;
                err
            } else {
                let deq = dequantize(&qb);
                Mat::from_fn(n, beta, |i, j| {
                    (wb[(i, j)] - deq[(i, j)]) / u[(c0 + j, c0 + j)]
                })
            };
            propagate(&mut work, c0 + beta, &err, u, c0);
            if !work.all_finite() {
                return Err(Error::NonFiniteIntermediate {
                    stage: format!("compensation after group {g}"),
                });
            }
        }
        blocks.push(qb);
        gammas.push(gamma);
    }

    let w_hat = assemble(&blocks);
    let diff = w_hat.sub(w)?;
    let recon_mse = if n * m == 0 {
        T::zero()
    } else {
        diff.frobenius_sq() / T::of((n * m) as f64)
    };
    let proxy = proxy_loss(w, &w_hat, &hs)?;
    let xs = subsample_rows(&x, cfg.max_kl_tokens);
    let recon_kl = output_kl(&xs, w, &w_hat, &cfg.kl)?;
    if !(proxy.is_finite() && recon_mse.is_finite() && recon_kl.is_finite()) {
        return Err(Error::NonFiniteIntermediate {
            stage: "metrics".into(),
        });
    }
    Ok(QuantizationResult {
        plan,
        blocks,
        gammas,
        mask_density,
        proxy_loss: proxy,
        recon_mse,
        recon_kl,
        damp: hs.damp,
    })
}

/// `work[:, from..] -= err · U[c0..c0+β, from..]`.
fn propagate<T: Scalar>(work: &mut Mat<T>, from: usize, err: &Mat<T>, u: &Mat<T>, c0: usize) {
    let m = work.cols();
    if from >= m {
        return;
    }
    for i in 0..work.rows() {
        let e = err.row(i);
        let row = &mut work.row_mut(i)[from..];
        for (j, &eij) in e.iter().enumerate() {
            if eij == T::zero() {
                continue;
            }
            let urow = &u.row(c0 + j)[from..];
            for (r, &uv) in row.iter_mut().zip(urow) {
                *r -= eij * uv;
            }
        }
    }
}

/// Quantize a group column by column with fixed parameters, pushing each
/// column's scaled error onto the group's remaining columns. Returns the
/// codes and the scaled error block.
fn quantize_columnwise<T: Scalar>(
    work: &mut Mat<T>,
    c0: usize,
    qb: &QuantizedBlock<T>,
    u: &Mat<T>,
) -> (Vec<u8>, Mat<T>) {
    let (n, beta) = (qb.rows(), qb.cols());
    let qmax = max_code(qb.bit_width());
    let mut codes = vec![0u8; n * beta];
    let mut err = Mat::zeros(n, beta);
    for j in 0..beta {
        let col = c0 + j;
        let d = u[(col, col)];
        for i in 0..n {
            let (s, z) = (qb.params.scale[i], qb.params.zero[i]);
            let v = work[(i, col)];
            let (code, deq) = match qb.encoding {
                Encoding::Affine => {
                    let c = quantize_value(v, s, z, qmax);
                    (c, dequantize_value(c, s, z))
                }
                Encoding::Sign => {
                    if v >= T::zero() {
                        (1, s)
                    } else {
                        (0, -s)
                    }
                }
            };
            codes[i * beta + j] = code;
            let e = (v - deq) / d;
            err[(i, j)] = e;
            for jj in j + 1..beta {
                let uv = u[(col, c0 + jj)];
                work[(i, c0 + jj)] -= e * uv;
            }
        }
    }
    (codes, err)
}
