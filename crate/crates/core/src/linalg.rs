//! Cholesky factorization and triangular inversion for symmetric positive definite matrices.

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::scalar::Scalar;

/// Lower-triangular `L` with `A = L Lᵀ`. Only the lower triangle of `a` is read.
pub fn cholesky_lower<T: Scalar>(a: &Mat<T>) -> Result<Mat<T>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::ShapeMismatch(format!("cholesky of {:?}", a.shape())));
    }
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !d.is_finite() || d <= T::zero() {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: d.as_f64(),
            });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            let (ri, rj) = (i * n, j * n);
            let data = l.as_slice();
            for k in 0..j {
                s -= data[ri + k] * data[rj + k];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix with non-zero diagonal.
pub fn invert_lower<T: Scalar>(l: &Mat<T>) -> Mat<T> {
    let n = l.rows();
    let mut inv = Mat::zeros(n, n);
    for j in 0..n {
        inv[(j, j)] = T::one() / l[(j, j)];
        for i in j + 1..n {
            let mut s = T::zero();
            for k in j..i {
                s += l[(i, k)] * inv[(k, j)];
            }
            inv[(i, j)] = -s / l[(i, i)];
        }
    }
    inv
}

/// `A⁻¹` from the Cholesky factor `L` of `A`, as `L⁻ᵀ L⁻¹`.
pub fn inverse_from_cholesky<T: Scalar>(l: &Mat<T>) -> Mat<T> {
    let n = l.rows();
    let li = invert_lower(l);
    let mut out = Mat::zeros(n, n);
    // (L⁻ᵀ L⁻¹)_{ij} = Σ_{k ≥ max(i,j)} Li[k][i] Li[k][j]
    for k in 0..n {
        let row = li.row(k);
        for i in 0..=k {
            let lki = row[i];
            if lki == T::zero() {
                continue;
            }
            for j in 0..=i {
                out[(i, j)] += lki * row[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            out[(j, i)] = out[(i, j)];
        }
    }
    out
}
