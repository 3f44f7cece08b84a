//! What goes wrong when additive separability is imposed but false.
//!
//! The model here lets a covariate `W` shift the slope on the selection
//! unobservable: `E[Y_d | W = w, U = u] = μ_d + w'τ_d + (ρ_d + w'η_d) h(u)`.
//! A researcher who assumes the slope is constant in `w` runs per-arm
//! regressions of `Y` on `(1, W, λ_d(P))` that omit the interaction
//! `W·λ_d(P)`, and the omitted-variable algebra gives closed forms for the
//! resulting estimand gaps. This module evaluates those formulas from
//! population (or sample) moments, generates the binary-covariate logit
//! design used to illustrate sign flips, and diagnoses the moment-variance
//! singularity that rules out two-stage-regression moment conditions under
//! identification failure.
//!
//! Throughout, `h(u) = u − 1/2`, so the control functions are
//! `λ₁(p) = E[h(U) | U ≤ p] = (p−1)/2` and `λ₀(p) = E[h(U) | U > p] = p/2`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::rng_for;

#[inline]
fn lambda1(p: f64) -> f64 {
    0.5 * (p - 1.0)
}

#[inline]
fn lambda0(p: f64) -> f64 {
    0.5 * p
}

/// Moments of `(W, λ_d(P))` conditional on one treatment arm `D = d`.
#[derive(Debug, Clone)]
pub struct ArmMoments {
    /// `E[W | D=d]`.
    pub e_w: DVector<f64>,
    /// `E[WW' | D=d]`.
    pub e_ww: DMatrix<f64>,
    /// `E[λ_d(P) | D=d]`.
    pub e_l: f64,
    /// `E[λ_d(P)² | D=d]`.
    pub e_l2: f64,
    /// `E[W λ_d(P) | D=d]`.
    pub e_wl: DVector<f64>,
    /// `E[WW' λ_d(P) | D=d]`.
    pub e_wwl: DMatrix<f64>,
    /// `E[W λ_d(P)² | D=d]`.
    pub e_wl2: DVector<f64>,
}

impl ArmMoments {
    fn check(&self, label: &str) -> Result<usize> {
        let l = self.e_w.len();
        if self.e_ww.shape() != (l, l)
            || self.e_wl.len() != l
            || self.e_wwl.shape() != (l, l)
            || self.e_wl2.len() != l
        {
            return Err(Error::Config(format!(
                "inconsistent moment dimensions for arm {label}"
            )));
        }
        Ok(l)
    }
}

/// Population moments feeding the bias formulas. The unconditional
/// covariate mean is derived from the arm moments through
/// `E[W] = P(D=1)·E[W|D=1] + P(D=0)·E[W|D=0]`, so it cannot be supplied
/// inconsistently.
#[derive(Debug, Clone)]
pub struct BiasInputs {
    pub arm1: ArmMoments,
    pub arm0: ArmMoments,
    /// `P(D = 1)`.
    pub p_d1: f64,
    /// Slope-heterogeneity loading of the treated arm.
    pub eta1: DVector<f64>,
    /// Slope-heterogeneity loading of the untreated arm.
    pub eta0: DVector<f64>,
}

impl BiasInputs {
    fn validate(&self) -> Result<usize> {
        let l1 = self.arm1.check("1")?;
        let l0 = self.arm0.check("0")?;
        if l1 != l0 || self.eta1.len() != l1 || self.eta0.len() != l1 {
            return Err(Error::Config(
                "covariate dimension must agree across arms and loadings".into(),
            ));
        }
        if !(self.p_d1 > 0.0 && self.p_d1 < 1.0) {
            return Err(Error::Config(format!(
                "treated share must be in (0, 1), got {}",
                self.p_d1
            )));
        }
        Ok(l1)
    }

    /// Unconditional covariate mean, by the law of total expectation.
    pub fn e_w(&self) -> DVector<f64> {
        self.p_d1 * &self.arm1.e_w + (1.0 - self.p_d1) * &self.arm0.e_w
    }
}

/// Per-arm coefficient gaps of the misspecified (interaction-omitting)
/// regression relative to the true model.
#[derive(Debug, Clone)]
pub struct ArmBias {
    /// Gap on the intercept `μ̃_d − μ_d`.
    pub mu: f64,
    /// Gap on the covariate coefficients `τ̃_d − τ_d`.
    pub tau: DVector<f64>,
    /// Gap on the selection slope `ρ̃_d − ρ_d`.
    pub rho: f64,
}

/// Coefficient gaps for one arm from the general omitted-variable
/// formulas: the slope gap is the regression coefficient of the omitted
/// `W'λ η` term on the within-arm residualized `λ`, the covariate gap
/// likewise with the roles swapped, and the intercept gap closes the
/// conditional-mean identity `E[Y | D=d]`.
pub fn bias_general(inputs: &BiasInputs, d: u8) -> Result<ArmBias> {
    inputs.validate()?;
    let (arm, eta) = match d {
        1 => (&inputs.arm1, &inputs.eta1),
        0 => (&inputs.arm0, &inputs.eta0),
        _ => return Err(Error::Config(format!("treatment arm must be 0 or 1, got {d}"))),
    };
    arm_bias(arm, eta)
}

fn arm_bias(arm: &ArmMoments, eta: &DVector<f64>) -> Result<ArmBias> {
    // Residualize λ on (1, W): λ⊥ = λ − a − b'W.
    let cov_w = linalg::symmetrize(&(&arm.e_ww - &arm.e_w * arm.e_w.transpose()));
    let cov_wl = &arm.e_wl - arm.e_l * &arm.e_w;
    let cov_w_inv = linalg::sym_inverse(&cov_w, "covariate variance")?;
    let b = &cov_w_inv * &cov_wl;
    let a = arm.e_l - arm.e_w.dot(&b);
    let var_l_perp = arm.e_l2 - a * arm.e_l - b.dot(&arm.e_wl);
    if !(var_l_perp.is_finite() && var_l_perp > 1e-12) {
        return Err(Error::Numerical(
            "residual variance of the control function is numerically zero; the \
             propensity scores do not vary within this arm"
                .into(),
        ));
    }
    // cov(Wλ, λ⊥) = E[Wλ·λ⊥] since the residual is mean zero.
    let cov_wl_lperp = &arm.e_wl2 - a * &arm.e_wl - &arm.e_wwl * &b;
    let rho = cov_wl_lperp.dot(eta) / var_l_perp;

    // Residualize W on (1, λ): W⊥ = W − c − g·λ.
    let var_l = arm.e_l2 - arm.e_l * arm.e_l;
    if !(var_l.is_finite() && var_l > 1e-12) {
        return Err(Error::Numerical(
            "the control function has numerically zero variance in this arm".into(),
        ));
    }
    let g = &cov_wl / var_l;
    let c = &arm.e_w - arm.e_l * &g;
    // E[W⊥W⊥'] = E[W⊥W'] because the residual is orthogonal to (1, λ).
    let m_ww = &arm.e_ww - &c * arm.e_w.transpose() - &g * arm.e_wl.transpose();
    let m_wwl = &arm.e_wwl - &c * arm.e_wl.transpose() - &g * arm.e_wl2.transpose();
    let m_ww_inv = linalg::sym_inverse(&linalg::symmetrize(&m_ww), "covariate residual variance")?;
    let tau = &m_ww_inv * (&m_wwl * eta);

    // Intercept via E[Y|D=d] equality between the two regressions.
    let mu = -arm.e_w.dot(&tau) - rho * arm.e_l + arm.e_wl.dot(eta);
    Ok(ArmBias { mu, tau, rho })
}

/// Estimand gaps of the misspecified model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimandBias {
    /// `ATE~ − ATE`.
    pub ate: f64,
    /// `CATE~(w) − CATE(w)` at the supplied covariate point.
    pub cate: Option<f64>,
    /// Gap on the average MTE slope `E[ρ₁(W) − ρ₀(W)]`.
    pub slope: f64,
}

/// Estimand gaps from the general coefficient-gap formulas. Valid for any
/// moment configuration of the model class.
pub fn bias_estimand_gaps(
    inputs: &BiasInputs,
    w_point: Option<&DVector<f64>>,
) -> Result<EstimandBias> {
    let l = inputs.validate()?;
    if let Some(w) = w_point {
        if w.len() != l {
            return Err(Error::Config(format!(
                "covariate point has dimension {}, expected {l}",
                w.len()
            )));
        }
    }
    let b1 = arm_bias(&inputs.arm1, &inputs.eta1)?;
    let b0 = arm_bias(&inputs.arm0, &inputs.eta0)?;
    let e_w = inputs.e_w();
    let d_mu = b1.mu - b0.mu;
    let d_tau = &b1.tau - &b0.tau;
    let ate = d_mu + e_w.dot(&d_tau);
    let cate = w_point.map(|w| d_mu + w.dot(&d_tau));
    // The true slope carries E[W'(η₁−η₀)]; the misspecified one has none.
    let slope = b1.rho - b0.rho - e_w.dot(&(&inputs.eta1 - &inputs.eta0));
    Ok(EstimandBias { ate, cate, slope })
}

/// Estimand gaps under the stronger premise that `W` is uncorrelated with
/// the control function (up to second moments) within each arm. These are
/// the display-ready closed forms; `bias_estimand_gaps` reproduces them
/// exactly when that premise holds and stays correct when it does not.
pub fn bias_ate_cate_slope(
    inputs: &BiasInputs,
    w_point: Option<&DVector<f64>>,
) -> Result<EstimandBias> {
    let l = inputs.validate()?;
    if let Some(w) = w_point {
        if w.len() != l {
            return Err(Error::Config(format!(
                "covariate point has dimension {}, expected {l}",
                w.len()
            )));
        }
    }
    let e_w = inputs.e_w();
    let (a1, a0) = (&inputs.arm1, &inputs.arm0);
    let ate = (&e_w - &a1.e_w).dot(&inputs.eta1) * a1.e_l
        - (&e_w - &a0.e_w).dot(&inputs.eta0) * a0.e_l;
    let cate = w_point.map(|w| {
        (w - &a1.e_w).dot(&inputs.eta1) * a1.e_l - (w - &a0.e_w).dot(&inputs.eta0) * a0.e_l
    });
    let p0 = 1.0 - inputs.p_d1;
    let slope =
        (&a1.e_w - &a0.e_w).dot(&(p0 * &inputs.eta1 + inputs.p_d1 * &inputs.eta0));
    Ok(EstimandBias { ate, cate, slope })
}

// --- the binary-covariate logit design ----------------------------------

/// Numerical design with one binary covariate: `W ~ Bernoulli(1/2)`,
/// `Z` standard logistic, propensity `P = σ(bW + Z)`, selection
/// `D = 1[U ≤ P]`, outcomes `Y_d = μ_d + ρ_d(W)(U − 1/2) + e_d` with
/// `μ₁ = 0.5`, `μ₀ = 0`, `ρ₁(w) = 1 + δ_ρ w`, `ρ₀(w) = −1 + δ_ρ w`, and
/// standard normal errors. The true ATE is 0.5 and the true average slope
/// is 2 for every `(b, δ_ρ)`; the misspecified estimand is biased exactly
/// when both `b` and `δ_ρ` are nonzero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LogitDesign {
    /// Covariate shift in the propensity index.
    pub b: f64,
    /// Slope heterogeneity `η₁ = η₀ = δ_ρ`.
    pub delta_rho: f64,
}

impl LogitDesign {
    pub fn true_ate(&self) -> f64 {
        0.5
    }

    pub fn true_slope(&self) -> f64 {
        2.0
    }

    fn logistic(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    /// Population moments by quadrature over the logistic instrument
    /// (substituting `t = F_Z(z)`, Simpson rule with `intervals` panels),
    /// exact up to quadrature error — no Monte Carlo noise.
    pub fn population_inputs(&self, intervals: usize) -> Result<BiasInputs> {
        if intervals < 10 {
            return Err(Error::Config("quadrature needs at least 10 intervals".into()));
        }
        let panels = intervals + intervals % 2;
        let step = 1.0 / panels as f64;
        // Accumulators per arm: mass, and raw integrals of
        // {1, w, λ, wλ, λ², wλ²} against the arm weight.
        let mut acc = [[0.0f64; 6]; 2];
        for w in [0.0f64, 1.0] {
            for i in 0..=panels {
                let t = i as f64 * step;
                let simpson = if i == 0 || i == panels {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                // z = F_Z^{-1}(t); the index is σ(bw + z) with the two
                // endpoint limits handled by the stable logistic.
                let p = if t <= 0.0 {
                    0.0
                } else if t >= 1.0 {
                    1.0
                } else {
                    Self::logistic(self.b * w + (t / (1.0 - t)).ln())
                };
                let coef = 0.5 * simpson * step / 3.0;
                let l1 = lambda1(p);
                let l0 = lambda0(p);
                let w1 = coef * p;
                acc[1][0] += w1;
                acc[1][1] += w1 * w;
                acc[1][2] += w1 * l1;
                acc[1][3] += w1 * w * l1;
                acc[1][4] += w1 * l1 * l1;
                acc[1][5] += w1 * w * l1 * l1;
                let w0 = coef * (1.0 - p);
                acc[0][0] += w0;
                acc[0][1] += w0 * w;
                acc[0][2] += w0 * l0;
                acc[0][3] += w0 * w * l0;
                acc[0][4] += w0 * l0 * l0;
                acc[0][5] += w0 * w * l0 * l0;
            }
        }
        let arm = |raw: &[f64; 6]| -> ArmMoments {
            let mass = raw[0];
            let e_w = raw[1] / mass;
            ArmMoments {
                e_w: DVector::from_element(1, e_w),
                // W is binary, so E[W²|D=d] = E[W|D=d].
                e_ww: DMatrix::from_element(1, 1, e_w),
                e_l: raw[2] / mass,
                e_l2: raw[4] / mass,
                e_wl: DVector::from_element(1, raw[3] / mass),
                e_wwl: DMatrix::from_element(1, 1, raw[3] / mass),
                e_wl2: DVector::from_element(1, raw[5] / mass),
            }
        };
        Ok(BiasInputs {
            arm1: arm(&acc[1]),
            arm0: arm(&acc[0]),
            p_d1: acc[1][0],
            eta1: DVector::from_element(1, self.delta_rho),
            eta0: DVector::from_element(1, self.delta_rho),
        })
    }

    /// Draw one sample: per unit `(w, d, λ_d(P), y)`.
    pub fn sample(&self, n: usize, seed: u64) -> BiasSample {
        let mut rng = rng_for(seed, &[0xb1a5]);
        let mut w = Vec::with_capacity(n);
        let mut d = Vec::with_capacity(n);
        let mut lam = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let wi = if rng.random::<bool>() { 1.0 } else { 0.0 };
            let t: f64 = rng.random();
            let p = Self::logistic(self.b * wi + (t / (1.0 - t)).ln());
            let u: f64 = rng.random();
            let di = u8::from(u <= p);
            let h = u - 0.5;
            let e1: f64 = StandardNormal.sample(&mut rng);
            let e0: f64 = StandardNormal.sample(&mut rng);
            let yi = if di == 1 {
                0.5 + (1.0 + self.delta_rho * wi) * h + e1
            } else {
                (-1.0 + self.delta_rho * wi) * h + e0
            };
            w.push(wi);
            d.push(di);
            lam.push(if di == 1 { lambda1(p) } else { lambda0(p) });
            y.push(yi);
        }
        BiasSample { w, d, lam, y }
    }

    /// Brute-force estimand gaps: run the misspecified per-arm
    /// regressions `Y ~ (1, W, λ_d(P))` on a simulated sample and compare
    /// the implied estimands to the analytic truths.
    pub fn simulated_estimand_gaps(
        &self,
        n: usize,
        seed: u64,
        w_point: Option<f64>,
    ) -> Result<EstimandBias> {
        let s = self.sample(n, seed);
        let mut coef = [[0.0f64; 3]; 2];
        for arm in [0u8, 1] {
            let rows: Vec<[f64; 3]> = s
                .w
                .iter()
                .zip(&s.d)
                .zip(&s.lam)
                .filter(|((_, &d), _)| d == arm)
                .map(|((&w, _), &l)| [1.0, w, l])
                .collect();
            let ys: Vec<f64> = s
                .y
                .iter()
                .zip(&s.d)
                .filter(|(_, &d)| d == arm)
                .map(|(&y, _)| y)
                .collect();
            coef[arm as usize] = ols3(&rows, &ys)?;
        }
        let w_bar = s.w.iter().sum::<f64>() / s.w.len() as f64;
        let ate_short = coef[1][0] - coef[0][0] + w_bar * (coef[1][1] - coef[0][1]);
        let slope_short = coef[1][2] - coef[0][2];
        let cate = w_point.map(|w| {
            // True CATE(w) equals the true ATE here since τ₁ = τ₀ = 0.
            coef[1][0] - coef[0][0] + w * (coef[1][1] - coef[0][1]) - self.true_ate()
        });
        Ok(EstimandBias {
            ate: ate_short - self.true_ate(),
            cate,
            slope: slope_short - self.true_slope(),
        })
    }
}

/// One simulated draw of the logit design.
#[derive(Debug, Clone)]
pub struct BiasSample {
    pub w: Vec<f64>,
    pub d: Vec<u8>,
    /// Own-arm control function `λ_d(P)` per unit.
    pub lam: Vec<f64>,
    pub y: Vec<f64>,
}

/// OLS with three regressors via accumulated cross-moments.
fn ols3(rows: &[[f64; 3]], ys: &[f64]) -> Result<[f64; 3]> {
    let mut xtx = DMatrix::<f64>::zeros(3, 3);
    let mut xty = DVector::<f64>::zeros(3);
    for (row, &y) in rows.iter().zip(ys) {
        for i in 0..3 {
            for j in 0..3 {
                xtx[(i, j)] += row[i] * row[j];
            }
            xty[i] += row[i] * y;
        }
    }
    let inv = linalg::sym_inverse(&xtx, "regressor cross-moment matrix")?;
    let b = inv * xty;
    Ok([b[0], b[1], b[2]])
}

// --- two-stage-moment singularity diagnostic ----------------------------

/// A linear MTE DGP for the two-stage-moment diagnostic: instrument
/// uniform over the levels of `p_true`, `Y_d = μ_d + ρ_d (U − 1/2) + e_d`
/// with standard normal errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoStageDesign {
    /// `(μ₀, μ₁)`.
    pub mu: [f64; 2],
    /// `(ρ₀, ρ₁)`.
    pub rho: [f64; 2],
    /// True propensity per instrument level.
    pub p_true: Vec<f64>,
}

/// Eigenvalue report for the simulated variance of a two-stage moment
/// vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingularityReport {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// `min / max` — the scale-free singularity measure.
    pub relative_min: f64,
    /// Set when `relative_min < 1e-8`.
    pub singular: bool,
    /// Whether the reparameterized moment vector was used.
    pub reparameterized: bool,
}

/// Variance of the two-stage regression moment vector, simulated under
/// `design` and evaluated at the design's `(μ, ρ)` with propensities
/// `p_eval`. The moment stacks per-arm second-stage residuals, the same
/// residuals times the own-arm control function, and one first-stage
/// score per instrument level. With equal entries in `p_eval` the
/// residual×control rows are exact multiples of the residual rows, so the
/// variance is singular no matter what generated the data. The
/// `reparameterized` variant recenters the control functions at level 0
/// and shifts the intercepts accordingly; the collinearity survives.
pub fn two_stage_singularity(
    design: &TwoStageDesign,
    p_eval: &[f64],
    n: usize,
    seed: u64,
    reparameterized: bool,
) -> Result<SingularityReport> {
    let levels = design.p_true.len();
    if levels < 2 || p_eval.len() != levels {
        return Err(Error::Config(format!(
            "need matching propensity vectors with at least two levels, got {} and {}",
            levels,
            p_eval.len()
        )));
    }
    if design.p_true.iter().chain(p_eval).any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::Config("propensity scores must lie in [0, 1]".into()));
    }
    if n < 100 {
        return Err(Error::Config("singularity diagnostic needs n >= 100".into()));
    }

    let rows = levels + 4;
    let mut rng = rng_for(seed, &[0x25ef]);
    let mut mean = DVector::<f64>::zeros(rows);
    let mut outer = DMatrix::<f64>::zeros(rows, rows);
    let mut g = DVector::<f64>::zeros(rows);
    // Intercepts as evaluated by the moment: raw, or recentred at level 0.
    let (icpt0, icpt1) = if reparameterized {
        (
            design.mu[0] - design.rho[0] * lambda0(p_eval[0]),
            design.mu[1] - design.rho[1] * lambda1(p_eval[0]),
        )
    } else {
        (design.mu[0], design.mu[1])
    };
    for _ in 0..n {
        let z = rng.random_range(0..levels);
        let u: f64 = rng.random();
        let d = u8::from(u <= design.p_true[z]);
        let e: f64 = StandardNormal.sample(&mut rng);
        let h = u - 0.5;
        let y = if d == 1 {
            design.mu[1] + design.rho[1] * h + e
        } else {
            design.mu[0] + design.rho[0] * h + e
        };

        let (l0, l1) = (lambda0(p_eval[z]), lambda1(p_eval[z]));
        let (c0, c1) = if reparameterized {
            (l0 - lambda0(p_eval[0]), l1 - lambda1(p_eval[0]))
        } else {
            (l0, l1)
        };
        g.fill(0.0);
        if d == 0 {
            let resid = y - icpt0 - design.rho[0] * c0;
            g[0] = resid;
            g[1] = resid * l0;
        } else {
            let resid = y - icpt1 - design.rho[1] * c1;
            g[2] = resid;
            g[3] = resid * l1;
        }
        g[4 + z] = p_eval[z] - f64::from(d);

        mean += &g;
        outer += &g * g.transpose();
    }
    let nf = n as f64;
    mean /= nf;
    let cov = linalg::symmetrize(&(outer / nf - &mean * mean.transpose()));
    let (min_eigenvalue, max_eigenvalue) = linalg::eig_range_sym(&cov);
    let scale = max_eigenvalue.abs().max(1e-300);
    let relative_min = min_eigenvalue / scale;
    Ok(SingularityReport {
        min_eigenvalue,
        max_eigenvalue,
        relative_min,
        singular: relative_min < 1e-8,
        reparameterized,
    })
}
