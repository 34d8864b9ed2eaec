//! Small dense linear-algebra helpers bridging `ndarray` and `nalgebra`.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{shape_err, Error, Result};

pub fn to_dmatrix(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Column means of a sample matrix (rows are observations).
pub fn column_means(x: ArrayView2<f64>) -> Result<Array1<f64>> {
    x.mean_axis(Axis(0))
        .ok_or_else(|| Error::Shape("cannot average an empty sample".into()))
}

/// Unbiased sample covariance (normalized by `m − 1`).
pub fn sample_covariance(x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let m = x.nrows();
    if m < 2 {
        return shape_err("sample covariance needs at least two rows");
    }
    let centered = &x - &column_means(x)?;
    Ok(centered.t().dot(&centered) / (m as f64 - 1.0))
}

/// Lower Cholesky factor of a symmetric positive semi-definite matrix. When
/// the matrix is numerically singular, a ridge `1e-8 · trace / q` is added
/// (repeatedly enlarged if needed); the second value reports the ridge used.
pub fn cholesky_with_ridge(a: ArrayView2<f64>) -> Result<(Array2<f64>, f64)> {
    let q = a.nrows();
    if q == 0 || a.ncols() != q {
        return shape_err(format!("expected a non-empty square matrix, got {:?}", a.dim()));
    }
    let base = to_dmatrix(a);
    if let Some(ch) = base.clone().cholesky() {
        if ch.l().diagonal().iter().all(|&v| v > 1e-12 * v.abs().max(1.0) && v.is_finite()) {
            return Ok((from_dmatrix(&ch.l()), 0.0));
        }
    }
    let trace: f64 = (0..q).map(|i| a[[i, i]]).sum();
    let mut ridge = 1e-8 * (trace / q as f64).max(f64::MIN_POSITIVE);
    for _ in 0..12 {
        let mut reg = base.clone();
        for i in 0..q {
            reg[(i, i)] += ridge;
        }
        if let Some(ch) = reg.cholesky() {
            return Ok((from_dmatrix(&ch.l()), ridge));
        }
        ridge *= 100.0;
    }
    Err(Error::Domain("matrix is not positive semi-definite".into()))
}

/// Inverse of a lower-triangular matrix.
pub fn invert_lower(l: ArrayView2<f64>) -> Result<Array2<f64>> {
    let lm = to_dmatrix(l);
    let eye = DMatrix::<f64>::identity(lm.nrows(), lm.ncols());
    lm.solve_lower_triangular(&eye)
        .map(|m| from_dmatrix(&m))
        .ok_or_else(|| Error::Domain("triangular factor is singular".into()))
}

/// Ordinary (optionally ridge-penalized) least squares of `y` on `x` with an
/// unpenalized intercept. Returns `(coefficients, intercept)`.
pub fn least_squares(x: ArrayView2<f64>, y: ArrayView1<f64>, ridge: f64) -> Result<(Array1<f64>, f64)> {
    let (n, p) = x.dim();
    if n != y.len() {
        return shape_err(format!("{n} rows but {} targets", y.len()));
    }
    if n == 0 {
        return shape_err("least squares needs at least one row");
    }
    let xm = column_means(x)?;
    let ym = y.mean().unwrap_or(0.0);
    let xc = &x - &xm;
    let yc = &y - ym;
    let mut gram = to_dmatrix(xc.t().dot(&xc).view());
    let rhs = DVector::from_iterator(p, xc.t().dot(&yc).into_iter());
    let scale = (0..p).map(|i| gram[(i, i)]).sum::<f64>() / p.max(1) as f64;
    let mut lambda = ridge.max(0.0);
    for attempt in 0..8 {
        let mut reg = gram.clone();
        for i in 0..p {
            reg[(i, i)] += lambda;
        }
        if let Some(ch) = reg.cholesky() {
            let beta = ch.solve(&rhs);
            if beta.iter().all(|v| v.is_finite()) {
                let coef = Array1::from_iter(beta.iter().copied());
                let intercept = ym - coef.dot(&xm);
                return Ok((coef, intercept));
            }
        }
        // Rank deficient: fall back to a vanishing ridge.
        lambda = 1e-10 * scale.max(1e-300) * 100f64.powi(attempt);
        gram = to_dmatrix(xc.t().dot(&xc).view());
    }
    Err(Error::Estimation("least squares system could not be solved".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn covariance_by_hand() {
        let x = array![[1.0, 2.0], [3.0, 6.0], [5.0, 7.0]];
        let s = sample_covariance(x.view()).unwrap();
        // means 3, 5; deviations (-2,-3),(0,1),(2,2)
        assert!((s[[0, 0]] - 4.0).abs() < 1e-14);
        assert!((s[[1, 1]] - 7.0).abs() < 1e-14);
        assert!((s[[0, 1]] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let (l, ridge) = cholesky_with_ridge(a.view()).unwrap();
        assert_eq!(ridge, 0.0);
        let back = l.dot(&l.t());
        assert!((&back - &a).iter().all(|v| v.abs() < 1e-12));
        let li = invert_lower(l.view()).unwrap();
        let eye = li.dot(&l);
        assert!((eye[[0, 0]] - 1.0).abs() < 1e-12 && eye[[1, 0]].abs() < 1e-12);
    }

    #[test]
    fn singular_gets_ridge() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        let (_, ridge) = cholesky_with_ridge(a.view()).unwrap();
        assert!(ridge > 0.0);
    }

    #[test]
    fn exact_linear_fit() {
        let x = array![[0.0, 1.0], [1.0, 0.0], [2.0, 3.0], [4.0, -1.0]];
        let y = x.column(0).mapv(|v| 2.0 * v) - x.column(1).mapv(|v| 0.5 * v) + 1.5;
        let (coef, b) = least_squares(x.view(), y.view(), 0.0).unwrap();
        assert!((coef[0] - 2.0).abs() < 1e-10 && (coef[1] + 0.5).abs() < 1e-10);
        assert!((b - 1.5).abs() < 1e-10);
    }

    #[test]
    fn rank_deficient_still_solves() {
        let x = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let y = array![2.0, 4.0, 6.0];
        let (coef, b) = least_squares(x.view(), y.view(), 0.0).unwrap();
        let pred = x.dot(&coef) + b;
        assert!((&pred - &y).iter().all(|v| v.abs() < 1e-6));
    }
}
