//! Hessian proxy, damped inverse and per-element weight salience.
//!
//! The proxy Hessian is `H = (1/T) Σ_t x_t x_tᵀ` over all calibration
//! tokens. Salience of weight `(i, j)` is `w_ij² / [(H + λI)⁻¹]_jj²`, the
//! output error induced by removing that weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, inverse_from_cholesky};
use crate::matrix::Mat;
use crate::scalar::Scalar;
use crate::tensor_store::CalibrationSet;

/// Damping used when `percdamp · mean(diag H)` vanishes.
pub const DAMP_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct HessianState<T> {
    /// Undamped proxy Hessian.
    pub h: Mat<T>,
    pub damp: T,
    /// Diagonal of `(H + λI)⁻¹`.
    pub inv_diag: Vec<T>,
    /// Upper-triangular `U` with `(H + λI)⁻¹ = Uᵀ U`.
    pub chol_inv: Mat<T>,
}

impl<T: Scalar> HessianState<T> {
    pub fn dim(&self) -> usize {
        self.h.rows()
    }
}

/// Which diagonal divides the squared weight in the salience formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SalienceDenominator {
    /// `[(H + λI)⁻¹]_jj`.
    #[default]
    InverseDiagonal,
    /// `U_jj` of the upper Cholesky factor of `(H + λI)⁻¹`.
    CholeskyDiagonal,
}

pub fn accumulate_hessian<T: Scalar>(calib: &CalibrationSet) -> Result<Mat<T>> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    hessian_from_tokens(&calib.tokens::<T>())
}

/// `(1/T) · XᵀX` for a `T × m` token matrix.
pub fn hessian_from_tokens<T: Scalar>(x: &Mat<T>) -> Result<Mat<T>> {
    let (t, m) = x.shape();
    if t == 0 {
        return Err(Error::EmptyCalibration);
    }
    let mut h = Mat::zeros(m, m);
    for r in 0..t {
        let xr = x.row(r);
        for i in 0..m {
            let xi = xr[i];
            if xi == T::zero() {
                continue;
            }
            let hrow = &mut h.row_mut(i)[..=i];
            for (hij, &xj) in hrow.iter_mut().zip(&xr[..=i]) {
                *hij += xi * xj;
            }
        }
    }
    let inv_t = T::one() / T::of(t as f64);
    for i in 0..m {
        for j in 0..=i {
            let v = h[(i, j)] * inv_t;
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(h)
}

pub fn damp_and_invert<T: Scalar>(h: &Mat<T>, percdamp: T) -> Result<HessianState<T>> {
    let m = h.rows();
    if h.cols() != m {
        return Err(Error::ShapeMismatch(format!(
            "hessian must be square, got {:?}",
            h.shape()
        )));
    }
    if !percdamp.is_finite() || percdamp < T::zero() {
        return Err(Error::InvalidConfig(format!(
            "percdamp {percdamp} must be finite and >= 0"
        )));
    }
    if !h.all_finite() {
        return Err(Error::NonFiniteIntermediate {
            stage: "hessian".into(),
        });
    }
    let mean_diag = if m == 0 {
        T::zero()
    } else {
        h.diag().into_iter().sum::<T>() / T::of(m as f64)
    };
    let mut damp = percdamp * mean_diag;
    if damp.is_nan() || damp <= T::zero() {
        damp = T::of(DAMP_FLOOR);
    }
    let mut damped = h.clone();
    for i in 0..m {
        damped[(i, i)] += damp;
    }
    let l = cholesky_lower(&damped)?;
    let inv = inverse_from_cholesky(&l);
    let inv_diag = inv.diag();
    let chol_inv = cholesky_lower(&inv)?.transpose();
    if inv_diag.iter().any(|&d| !d.is_finite() || d <= T::zero()) {
        return Err(Error::NonFiniteIntermediate {
            stage: "damped inverse".into(),
        });
    }
    Ok(HessianState {
        h: h.clone(),
        damp,
        inv_diag,
        chol_inv,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SalienceMap<T> {
    pub delta: Mat<T>,
    pub group_size: usize,
    /// Mean salience of each `n × β` column group.
    pub group_mean: Vec<T>,
    /// Mean salience of each input channel (column).
    pub channel_mean: Vec<T>,
}

impl<T: Scalar> SalienceMap<T> {
    /// Aggregate an element-wise salience matrix.
    pub fn from_delta(delta: Mat<T>, group_size: usize) -> Result<Self> {
        let (n, m) = delta.shape();
        check_group_size(m, group_size)?;
        let mut channel_sum = vec![T::zero(); m];
        for i in 0..n {
            for (c, &d) in channel_sum.iter_mut().zip(delta.row(i)) {
                *c += d;
            }
        }
        let group_mean = channel_sum
            .chunks(group_size)
            .map(|c| c.iter().copied().sum::<T>() / T::of((n * group_size).max(1) as f64))
            .collect();
        let channel_mean = channel_sum
            .into_iter()
            .map(|s| s / T::of(n.max(1) as f64))
            .collect();
        Ok(Self {
            delta,
            group_size,
            group_mean,
            channel_mean,
        })
    }

    pub fn groups(&self) -> usize {
        self.group_mean.len()
    }

    pub fn group_block(&self, g: usize) -> Mat<T> {
        self.delta
            .column_block(g * self.group_size, self.group_size)
    }
}

pub fn check_group_size(columns: usize, group_size: usize) -> Result<()> {
    if group_size == 0 || !columns.is_multiple_of(group_size) {
        return Err(Error::BadGroupSize {
            group_size,
            columns,
        });
    }
    Ok(())
}

pub fn salience_map<T: Scalar>(
    w: &Mat<T>,
    hs: &HessianState<T>,
    group_size: usize,
    denominator: SalienceDenominator,
) -> Result<SalienceMap<T>> {
    let m = w.cols();
    if hs.dim() != m {
        return Err(Error::ShapeMismatch(format!(
            "weights have {m} columns but hessian is {}x{}",
            hs.dim(),
            hs.dim()
        )));
    }
    check_group_size(m, group_size)?;
    let denom: Vec<T> = match denominator {
        SalienceDenominator::InverseDiagonal => hs.inv_diag.iter().map(|&d| d * d).collect(),
        SalienceDenominator::CholeskyDiagonal => {
            hs.chol_inv.diag().into_iter().map(|d| d * d).collect()
        }
    };
    let delta = Mat::from_fn(w.rows(), m, |i, j| {
        let v = w[(i, j)];
        v * v / denom[j]
    });
    SalienceMap::from_delta(delta, group_size)
}

/// Elements whose salience exceeds `mean + 3σ` of the block (population σ).
pub fn salient_mask_3sigma<T: Scalar>(block: &Mat<T>) -> Vec<bool> {
    let vals = block.as_slice();
    if vals.is_empty() {
        return Vec::new();
    }
    let len = T::of(vals.len() as f64);
    let mean = vals.iter().copied().sum::<T>() / len;
    let var = vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / len;
    let threshold = mean + T::of(3.0) * var.sqrt();
    vals.iter().map(|&v| v > threshold).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::DenseTensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn calib(rows: &[Vec<f32>]) -> CalibrationSet {
        let m = rows[0].len();
        CalibrationSet::new(vec![
            DenseTensor::new(vec![rows.len(), m], rows.concat()).unwrap()
        ])
        .unwrap()
    }

    #[test]
    fn one_hot_token() {
        let h: Mat<f64> = accumulate_hessian(&calib(&[vec![1.0, 0.0, 0.0]])).unwrap();
        assert_eq!(h.as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn orthogonal_pair() {
        let h: Mat<f64> = accumulate_hessian(&calib(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        assert_eq!(h.as_slice(), &[0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn empty_calibration_rejected() {
        let empty = CalibrationSet::new(vec![]).unwrap();
        assert!(matches!(
            accumulate_hessian::<f64>(&empty),
            Err(Error::EmptyCalibration)
        ));
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows: Vec<Vec<f32>> = (0..64)
            .map(|_| (0..9).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let h: Mat<f64> = accumulate_hessian(&calib(&rows)).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let mut s = 0.0;
                for r in &rows {
                    s += r[i] as f64 * r[j] as f64;
                }
                s /= 64.0;
                assert!((h[(i, j)] - s).abs() <= 1e-5 * s.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn identity_damping() {
        let hs = damp_and_invert(&Mat::<f64>::identity(4), 0.01).unwrap();
        assert!((hs.damp - 0.01).abs() < 1e-15);
        for d in hs.inv_diag {
            assert!((d - 1.0 / 1.01).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_percdamp_uses_floor() {
        let h = Mat::from_rows(&[vec![4.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let hs = damp_and_invert(&h, 0.0).unwrap();
        assert_eq!(hs.damp, DAMP_FLOOR);
        assert!((hs.inv_diag[0] - 0.25).abs() < 1e-8);
        assert!((hs.inv_diag[1] - 1.0).abs() < 1e-7);
        let zero = damp_and_invert(&Mat::<f64>::zeros(3, 3), 0.01).unwrap();
        assert_eq!(zero.damp, DAMP_FLOOR);
    }

    #[test]
    fn negative_percdamp_rejected() {
        assert!(damp_and_invert(&Mat::<f64>::identity(2), -0.1).is_err());
    }

    #[test]
    fn chol_inv_factors_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Mat<f64> = Mat::from_fn(40, 6, |_, _| rng.random_range(-1.0..1.0));
        let h = hessian_from_tokens(&x).unwrap();
        let hs = damp_and_invert(&h, 0.01).unwrap();
        let u = &hs.chol_inv;
        for i in 0..6 {
            for j in 0..i {
                assert_eq!(u[(i, j)], 0.0);
            }
        }
        let inv = u.transpose().matmul(u).unwrap();
        for i in 0..6 {
            assert!((inv[(i, i)] - hs.inv_diag[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_hessian_salience_is_squared_weight() {
        let hs = HessianState {
            h: Mat::identity(4),
            damp: 0.0,
            inv_diag: vec![1.0; 4],
            chol_inv: Mat::identity(4),
        };
        let w = Mat::from_rows(&[vec![1.0, -2.0, 3.0, 0.5], vec![0.0, 1.0, -1.0, 2.0]]).unwrap();
        let s = salience_map(&w, &hs, 2, SalienceDenominator::InverseDiagonal).unwrap();
        assert_eq!(s.delta, w.map(|v| v * v));
        assert_eq!(
            s.group_mean,
            vec![
                (1.0 + 4.0 + 0.0 + 1.0) / 4.0,
                (9.0 + 0.25 + 1.0 + 4.0) / 4.0
            ]
        );
        assert_eq!(s.channel_mean, vec![0.5, 2.5, 5.0, 2.125]);
        assert!(matches!(
            salience_map(&w, &hs, 3, SalienceDenominator::InverseDiagonal),
            Err(Error::BadGroupSize { .. })
        ));
    }

    #[test]
    fn zero_weights_zero_salience() {
        let hs = damp_and_invert(&Mat::<f64>::identity(4), 0.01).unwrap();
        let s = salience_map(
            &Mat::zeros(3, 4),
            &hs,
            2,
            SalienceDenominator::InverseDiagonal,
        )
        .unwrap();
        assert!(s.delta.as_slice().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn salience_scales_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x: Mat<f64> = Mat::from_fn(64, 8, |_, _| rng.random_range(-1.0..1.0));
        let hs = damp_and_invert(&hessian_from_tokens(&x).unwrap(), 0.01).unwrap();
        let w: Mat<f64> = Mat::from_fn(5, 8, |_, _| rng.random_range(-1.0..1.0));
        let a = salience_map(&w, &hs, 4, SalienceDenominator::InverseDiagonal).unwrap();
        let b = salience_map(
            &w.map(|v| v * 4.0),
            &hs,
            4,
            SalienceDenominator::InverseDiagonal,
        )
        .unwrap();
        for (x, y) in a.delta.as_slice().iter().zip(b.delta.as_slice()) {
            assert!((x * 16.0 - y).abs() <= 1e-12 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn outlier_channel_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (t, m, q) = (64, 16, 11);
        let mut x = Mat::from_fn(t, m, |_, _| StandardNormal.sample(&mut rng));
        x[(5, q)] = 100.0;
        let hs = damp_and_invert(&hessian_from_tokens(&x).unwrap(), 0.01).unwrap();
        let w = Mat::from_fn(16, m, |_, _| StandardNormal.sample(&mut rng));
        let s = salience_map(&w, &hs, 4, SalienceDenominator::InverseDiagonal).unwrap();
        let argmax = (0..m)
            .max_by(|&a, &b| s.channel_mean[a].partial_cmp(&s.channel_mean[b]).unwrap())
            .unwrap();
        assert_eq!(argmax, q);
    }

    #[test]
    fn mask_constant_block_is_empty() {
        let block = Mat::from_fn(4, 4, |_, _| 2.5_f64);
        assert!(salient_mask_3sigma(&block).iter().all(|&b| !b));
    }

    #[test]
    fn mask_single_spike() {
        // 64 entries, 63 ones and one 1000:
        // μ = (63 + 1000)/64 = 16.609375, σ² = 63·(1 − μ)²/64 + (1000 − μ)²/64
        let mut block = Mat::from_fn(8, 8, |_, _| 1.0_f64);
        block[(3, 5)] = 1000.0;
        let mu = (63.0 + 1000.0) / 64.0;
        let var = (63.0 * (1.0_f64 - mu).powi(2) + (1000.0_f64 - mu).powi(2)) / 64.0;
        let threshold = mu + 3.0 * var.sqrt();
        assert!(1.0 < threshold && 1000.0 > threshold);
        let mask = salient_mask_3sigma(&block);
        assert_eq!(mask.iter().filter(|&&b| b).count(), 1);
        assert!(mask[3 * 8 + 5]);
    }

    #[test]
    fn gaussian_mask_is_sparse() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let block: Mat<f64> = Mat::from_fn(16, 32, |_, _| StandardNormal.sample(&mut rng));
            let mask = salient_mask_3sigma(&block);
            let frac = mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64;
            assert!(frac < 0.05, "masked fraction {frac}");
        }
    }
}
