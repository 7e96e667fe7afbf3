//! Small dense helpers built on triangular factorizations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative jitter levels tried in order when a plain factorization fails.
pub const JITTER_LEVELS: [f64; 2] = [1e-9, 1e-6];

fn jitter_base<T: Scalar>(m: &DMatrix<T>) -> T {
    let d = m.nrows().max(1);
    let tr = m.trace() / T::lit(d as f64);
    if tr > T::zero() && tr.is_finite() {
        tr
    } else {
        T::one()
    }
}

/// Cholesky factorization with the mixture-wide jitter policy: the matrix is
/// tried as given, then with `1e-9 * trace/D` and `1e-6 * trace/D` added to
/// the diagonal. Returns `None` when all attempts fail.
pub fn try_cholesky<T: Scalar>(m: &DMatrix<T>) -> Option<Cholesky<T, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some(c);
    }
    let base = jitter_base(m);
    for level in JITTER_LEVELS {
        let mut a = m.clone();
        let j = base * T::lit(level);
        for i in 0..a.nrows() {
            a[(i, i)] += j;
        }
        if let Some(c) = Cholesky::new(a) {
            return Some(c);
        }
    }
    None
}

pub fn cholesky<T: Scalar>(m: &DMatrix<T>, context: &str) -> Result<Cholesky<T, Dyn>> {
    try_cholesky(m).ok_or_else(|| Error::numerical(context, "matrix not positive definite after jitter"))
}

pub fn log_det<T: Scalar>(chol: &Cholesky<T, Dyn>) -> T {
    let l = chol.l_dirty();
    let mut s = T::zero();
    for i in 0..l.nrows() {
        s += l[(i, i)].ln();
    }
    s + s
}

/// `xᵀ Σ⁻¹ x` via forward substitution against the Cholesky factor.
pub fn mahalanobis_sq<T: Scalar>(chol: &Cholesky<T, Dyn>, x: &DVector<T>) -> T {
    let l = chol.l_dirty();
    let n = x.len();
    let mut z = x.clone();
    for i in 0..n {
        let mut s = z[i];
        for k in 0..i {
            s -= l[(i, k)] * z[k];
        }
        z[i] = s / l[(i, i)];
    }
    z.dot(&z)
}

/// `L z` where `L` is the lower Cholesky factor; used to colour white noise.
pub fn lower_mul<T: Scalar>(chol: &Cholesky<T, Dyn>, z: &DVector<T>) -> DVector<T> {
    let l = chol.l_dirty();
    let n = z.len();
    let mut out = DVector::zeros(n);
    for i in 0..n {
        let mut s = T::zero();
        for k in 0..=i {
            s += l[(i, k)] * z[k];
        }
        out[i] = s;
    }
    out
}

pub fn symmetrize<T: Scalar>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Numerically stable `log Σ exp(v_i)`; returns `-inf` for an all `-inf` input.
pub fn log_sum_exp<T: Scalar>(values: &[T]) -> T {
    let mut max = T::lit(f64::NEG_INFINITY);
    for &v in values {
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return max;
    }
    let mut s = T::zero();
    for &v in values {
        s += (v - max).exp();
    }
    max + s.ln()
}

pub fn ln_2pi<T: Scalar>() -> T {
    T::lit((2.0 * std::f64::consts::PI).ln())
}

/// Row-major nested copy, the on-disk layout for matrices.
pub fn to_rows<T: Scalar>(m: &DMatrix<T>) -> Vec<Vec<T>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

/// Inverse of [`to_rows`]; `ncols` is used when there are no rows.
pub fn from_rows<T: Scalar>(rows: &[Vec<T>], ncols: usize) -> Result<DMatrix<T>> {
    let c = rows.first().map_or(ncols, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::contract("matrix rows have unequal lengths"));
    }
    let flat: Vec<T> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), c, &flat))
}
