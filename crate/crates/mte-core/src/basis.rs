//! Polynomial basis and control functions for the MTE model.
//!
//! The marginal treatment response for arm `d` is modeled as
//! `E[Y_d | U = u] = mu_d + sum_m rho_dm h_m(u)` with the centered power
//! basis `h_m(u) = u^m - 1/(m+1)`, which integrates to zero on [0, 1].
//! Averaging `h_m(U)` over the selection region of each arm produces the
//! control functions `lambda_dm(p)`:
//!
//! * treated (`U <= p`):    `lambda_1m(p) = (p^m - 1) / (m+1)`
//! * untreated (`U > p`):   `lambda_0m(p) = (p + p^2 + ... + p^m) / (m+1)`
//!
//! both with `lambda_d0 = 1` for the intercept. Stacking the control
//! functions over instrument levels yields the design matrix of the moment
//! system `A theta = beta`; its derivative stacks are the building blocks
//! for the variance corrections used by the robust tests.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp for propensity arguments; keeps evaluations finite even for
/// degenerate inputs without changing anything at interior points.
const P_CLAMP: f64 = 1e-10;

/// Available MTR basis families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    /// Centered powers `u^m - 1/(m+1)`.
    PolynomialCentered,
}

/// Model specification: basis family, polynomial order and parameter box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MteSpec {
    /// Polynomial order `M >= 1`.
    pub order: usize,
    pub basis: BasisKind,
    /// Rectangular parameter space for `theta = (theta_1', theta_0')'`,
    /// one `(lo, hi)` pair per coordinate, length `2(M+1)`.
    pub theta_box: Vec<(f64, f64)>,
}

impl MteSpec {
    /// Centered-polynomial spec of the given order with the default
    /// parameter box `[-10, 10]` per coordinate.
    pub fn polynomial(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("MTE order must be at least 1".into()));
        }
        Ok(MteSpec {
            order,
            basis: BasisKind::PolynomialCentered,
            theta_box: vec![(-10.0, 10.0); 2 * (order + 1)],
        })
    }

    /// Replace the parameter box (must have `2(M+1)` coordinate ranges).
    pub fn with_theta_box(mut self, theta_box: Vec<(f64, f64)>) -> Result<Self> {
        if theta_box.len() != self.dim() {
            return Err(Error::Config(format!(
                "theta box has {} coordinate ranges, expected {}",
                theta_box.len(),
                self.dim()
            )));
        }
        if theta_box.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config("theta box has an empty coordinate range".into()));
        }
        self.theta_box = theta_box;
        Ok(self)
    }

    /// Parameter dimension `2(M+1)`.
    pub fn dim(&self) -> usize {
        2 * (self.order + 1)
    }

    /// Range of `c' theta` over the parameter box (interval arithmetic).
    pub fn lambda_range(&self, c: &DVector<f64>) -> (f64, f64) {
        let mut lo = 0.0;
        let mut hi = 0.0;
        for (ci, &(bl, bh)) in c.iter().zip(&self.theta_box) {
            lo += (ci * bl).min(ci * bh);
            hi += (ci * bl).max(ci * bh);
        }
        (lo, hi)
    }
}

fn clamp_p(p: f64) -> f64 {
    let clamped = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    if clamped != p {
        log::warn!("propensity argument {p} clamped into [{P_CLAMP}, {}]", 1.0 - P_CLAMP);
    }
    clamped
}

/// Basis function `h_m(u)`; `h_0 = 1`, `h_m(u) = u^m - 1/(m+1)` for `m >= 1`.
pub fn basis_h(spec: &MteSpec, m: usize, u: f64) -> f64 {
    debug_assert!(m <= spec.order);
    match spec.basis {
        BasisKind::PolynomialCentered => {
            if m == 0 {
                1.0
            } else {
                u.powi(m as i32) - 1.0 / (m as f64 + 1.0)
            }
        }
    }
}

/// Control function `lambda_dm(p) = E[h_m(U) | selection into arm d]`.
pub fn control_lambda(spec: &MteSpec, d: u8, m: usize, p: f64) -> f64 {
    debug_assert!(m <= spec.order && d <= 1);
    let p = clamp_p(p);
    match spec.basis {
        BasisKind::PolynomialCentered => {
            if m == 0 {
                return 1.0;
            }
            let mp1 = m as f64 + 1.0;
            if d == 1 {
                (p.powi(m as i32) - 1.0) / mp1
            } else {
                // p + p^2 + ... + p^m, evaluated by Horner.
                let mut s = 0.0;
                for _ in 0..m {
                    s = p * (1.0 + s);
                }
                s / mp1
            }
        }
    }
}

/// Derivative of the control function in `p`; zero for the intercept.
pub fn control_lambda_deriv(spec: &MteSpec, d: u8, m: usize, p: f64) -> f64 {
    debug_assert!(m <= spec.order && d <= 1);
    let p = clamp_p(p);
    match spec.basis {
        BasisKind::PolynomialCentered => {
            if m == 0 {
                return 0.0;
            }
            let mp1 = m as f64 + 1.0;
            if d == 1 {
                m as f64 * p.powi(m as i32 - 1) / mp1
            } else {
                // 1 + 2p + ... + m p^(m-1).
                let mut s = 0.0;
                for j in (1..=m).rev() {
                    s = s * p + j as f64;
                }
                s / mp1
            }
        }
    }
}

/// Design matrices of the moment system, one block per arm.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    /// Treated-arm block, `(K+1) x (M+1)`.
    pub a1: DMatrix<f64>,
    /// Untreated-arm block, `(K+1) x (M+1)`.
    pub a0: DMatrix<f64>,
    /// Block-diagonal stack `diag(a1, a0)`, `2(K+1) x 2(M+1)`.
    pub a: DMatrix<f64>,
}

/// Build the design matrices at the propensity vector `p`.
pub fn build_a(spec: &MteSpec, p: &[f64]) -> DesignMatrices {
    let rows = p.len();
    let cols = spec.order + 1;
    let mut a1 = DMatrix::zeros(rows, cols);
    let mut a0 = DMatrix::zeros(rows, cols);
    for (l, &pl) in p.iter().enumerate() {
        for m in 0..cols {
            a1[(l, m)] = control_lambda(spec, 1, m, pl);
            a0[(l, m)] = control_lambda(spec, 0, m, pl);
        }
    }
    let a = crate::linalg::block_diag2(&a1, &a0);
    DesignMatrices { a1, a0, a }
}

/// Derivative of `A theta` in `p`: the `2(K+1) x (K+1)` stack
/// `[diag_l {sum_m theta_1m lambda'_1m(p_l)}; diag_l {sum_m theta_0m lambda'_0m(p_l)}]`.
pub fn build_h(spec: &MteSpec, p: &[f64], theta: &DVector<f64>) -> DMatrix<f64> {
    assert_eq!(theta.len(), spec.dim(), "theta length mismatch");
    let kp1 = p.len();
    let mp1 = spec.order + 1;
    let mut h = DMatrix::zeros(2 * kp1, kp1);
    for (l, &pl) in p.iter().enumerate() {
        let mut top = 0.0;
        let mut bot = 0.0;
        for m in 0..mp1 {
            top += theta[m] * control_lambda_deriv(spec, 1, m, pl);
            bot += theta[mp1 + m] * control_lambda_deriv(spec, 0, m, pl);
        }
        h[(l, l)] = top;
        h[(kp1 + l, l)] = bot;
    }
    h
}

/// Derivative of the `j`-th design column in `p` (`j` is 1-based over the
/// `2(M+1)` columns of `A`): `M_j = [diag lambda'_1,j-1; 0]` for columns in
/// the treated block and `[0; diag lambda'_0,j-M-2]` for the untreated block.
pub fn build_mj(spec: &MteSpec, p: &[f64], j: usize) -> DMatrix<f64> {
    let mp1 = spec.order + 1;
    assert!(j >= 1 && j <= 2 * mp1, "column index out of range");
    let kp1 = p.len();
    let mut mj = DMatrix::zeros(2 * kp1, kp1);
    if j <= mp1 {
        let m = j - 1;
        for (l, &pl) in p.iter().enumerate() {
            mj[(l, l)] = control_lambda_deriv(spec, 1, m, pl);
        }
    } else {
        let m = j - mp1 - 1;
        for (l, &pl) in p.iter().enumerate() {
            mj[(kp1 + l, l)] = control_lambda_deriv(spec, 0, m, pl);
        }
    }
    mj
}
