//! Small dense linear-algebra helpers shared by the inference modules.
//!
//! Every matrix in this crate is tiny (at most a few dozen rows), so plain
//! symmetric eigendecompositions are used for inverses and matrix square
//! roots. Ill-conditioned covariance matrices are reported as errors instead
//! of being silently regularized: a near-singular variance indicates an
//! overlap or degenerate-outcome problem upstream that the caller must see.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Relative condition-number limit beyond which covariance matrices are
/// treated as numerically singular.
pub const COND_LIMIT: f64 = 1e12;

/// Force exact symmetry (averages off-diagonal pairs).
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

fn singular_covariance_error(context: &str, cond: f64) -> Error {
    Error::Numerical(format!(
        "{context}: covariance matrix is numerically singular (condition ~ {cond:.3e}); \
         this requires propensity scores bounded away from 0 and 1, positive instrument \
         cell masses, and positive within-cell outcome variances"
    ))
}

/// Eigendecomposition of a symmetric matrix; eigenvalues ascending.
pub fn sym_eig(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let se = symmetrize(m).symmetric_eigen();
    // nalgebra does not guarantee an eigenvalue order; sort ascending.
    let n = se.eigenvalues.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| se.eigenvalues[i].total_cmp(&se.eigenvalues[j]));
    let vals = DVector::from_iterator(n, idx.iter().map(|&i| se.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (col, &i) in idx.iter().enumerate() {
        vecs.set_column(col, &se.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eig_range_sym(m: &DMatrix<f64>) -> (f64, f64) {
    let (vals, _) = sym_eig(m);
    (vals[0], vals[vals.len() - 1])
}

/// Inverse of a symmetric positive-definite matrix with a condition check.
pub fn sym_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eig(m);
    let max = vals[vals.len() - 1].abs();
    let min = vals[0];
    if !(min > 0.0) || max / min > COND_LIMIT || !max.is_finite() {
        return Err(singular_covariance_error(context, max / min.max(f64::MIN_POSITIVE)));
    }
    let inv_diag = DMatrix::from_diagonal(&vals.map(|v| 1.0 / v));
    Ok(&vecs * inv_diag * vecs.transpose())
}

/// Inverse and symmetric inverse square root of an SPD matrix.
///
/// Returns `(m^-1, m^-1/2)` with `m^-1/2` symmetric, computed from one
/// eigendecomposition; fails on indefinite or ill-conditioned input.
pub fn sym_inv_and_inv_sqrt(m: &DMatrix<f64>, context: &str) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (vals, vecs) = sym_eig(m);
    let max = vals[vals.len() - 1].abs();
    let min = vals[0];
    if !(min > 0.0) || max / min > COND_LIMIT || !max.is_finite() {
        return Err(singular_covariance_error(context, max / min.max(f64::MIN_POSITIVE)));
    }
    let inv = &vecs * DMatrix::from_diagonal(&vals.map(|v| 1.0 / v)) * vecs.transpose();
    let inv_sqrt = &vecs * DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.sqrt())) * vecs.transpose();
    Ok((inv, inv_sqrt))
}

/// Moore–Penrose pseudo-inverse via SVD with a relative tolerance.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let tol = rel_tol * max_sv.max(f64::MIN_POSITIVE);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let sig_inv = DMatrix::from_diagonal(&svd.singular_values.map(|s| if s > tol { 1.0 / s } else { 0.0 }));
    v_t.transpose() * sig_inv * u.transpose()
}

/// 2x2 block-diagonal matrix `diag(a, b)`.
pub fn block_diag2(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = DMatrix::zeros(ra + rb, ca + cb);
    out.view_mut((0, 0), (ra, ca)).copy_from(a);
    out.view_mut((ra, ca), (rb, cb)).copy_from(b);
    out
}

/// Orthonormal basis of the hyperplane `{t : c' t = 0}`.
///
/// Columns 1.. of the Householder reflector that maps `c` onto a coordinate
/// axis; the result has `dim(c) - 1` orthonormal columns, each orthogonal
/// to `c` at machine precision.
pub fn nullspace_of(c: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = c.len();
    let norm = c.norm();
    if !(norm > 0.0) {
        return Err(Error::Config("weight vector is identically zero".into()));
    }
    let mut v = c.clone();
    v[0] += c[0].signum() * norm;
    let vtv = v.dot(&v);
    let h = DMatrix::identity(n, n) - (2.0 / vtv) * (&v * v.transpose());
    Ok(h.columns(1, n - 1).into_owned())
}

/// Empirical `q`-quantile: the `ceil(q*n)`-th smallest value.
pub fn empirical_quantile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty() && (0.0..=1.0).contains(&q));
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

/// Chi-squared quantile.
pub fn chi2_quantile(df: f64, p: f64) -> f64 {
    ChiSquared::new(df).expect("valid df").inverse_cdf(p)
}

/// Standard-normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spd_example() -> DMatrix<f64> {
        // A' A + I for a fixed A is SPD.
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.5, -1.0, 0.3, 2.0, 0.0, 1.5, -0.7]);
        a.transpose() * &a + DMatrix::identity(3, 3)
    }

    #[test]
    fn inverse_and_inv_sqrt_agree() {
        let m = spd_example();
        let (inv, inv_sqrt) = sym_inv_and_inv_sqrt(&m, "test").unwrap();
        let should_be_identity = &m * &inv;
        let inv2 = &inv_sqrt * &inv_sqrt;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(should_be_identity[(i, j)], target, epsilon = 1e-12);
                assert_abs_diff_eq!(inv2[(i, j)], inv[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn singular_matrix_is_rejected_with_diagnostic() {
        let mut m = spd_example();
        // Make row/col 2 a copy of row/col 1 -> exactly singular.
        let col = m.column(1).into_owned();
        m.set_column(2, &col);
        let row = m.row(1).into_owned();
        m.set_row(2, &row);
        m[(2, 2)] = m[(1, 1)];
        let err = sym_inverse(&m, "unit test").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("numerically singular"), "{msg}");
        assert!(msg.contains("propensity"), "{msg}");
    }

    #[test]
    fn nullspace_is_orthonormal_and_orthogonal_to_c() {
        let c = DVector::from_vec(vec![1.0, 0.0, -1.0, 0.0]);
        let n = nullspace_of(&c).unwrap();
        assert_eq!(n.shape(), (4, 3));
        let gram = n.transpose() * &n;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(gram[(i, j)], target, epsilon = 1e-12);
            }
        }
        let proj = n.transpose() * &c;
        assert!(proj.amax() < 1e-12);
    }

    #[test]
    fn quantile_uses_order_statistics() {
        let xs: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(empirical_quantile(&xs, 0.95), 95.0);
        assert_eq!(empirical_quantile(&xs, 1.0), 100.0);
        assert_eq!(empirical_quantile(&xs, 0.0), 1.0);
    }

    #[test]
    fn chi2_reference_values() {
        assert_abs_diff_eq!(chi2_quantile(1.0, 0.95), 3.841458820694124, epsilon = 1e-9);
        assert_abs_diff_eq!(normal_quantile(0.975), 1.959963984540054, epsilon = 1e-9);
    }
}
