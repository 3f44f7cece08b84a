//! Weight vectors that map MTR coefficients into scalar target parameters.
//!
//! Every supported estimand is a linear functional `c' theta` of the MTR
//! coefficients. The first block of `c` weights the treated arm, the second
//! block is its negative (treatment-minus-control contrast), and the
//! intercept weight is always 1. For the centered polynomial basis the
//! weights have closed forms in the cell propensities `p` and masses `q`;
//! their analytic `(p, q)` gradients feed the variance corrections used
//! when a data-dependent weight is treated as estimated rather than fixed.
//!
//! Policy-relevant effects compare the status-quo propensity `p` with a
//! counterfactual `f(p)` (additive or proportional shifts, or a smoothed
//! quota cap) and weight by the mass of shifted compliers; their marginal
//! (small-shift) limits are available in closed form as well.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::MteSpec;
use crate::data::CellStats;
use crate::error::{Error, Result};

/// Target parameters expressible as `c' theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Target {
    /// Average treatment effect.
    Ate,
    /// Marginal treatment effect at a fixed unobserved resistance `u`.
    Mte { u: f64 },
    /// Average effect on the treated.
    Att,
    /// Average effect on the untreated.
    Atu,
    /// Local average effect of moving the instrument from the baseline
    /// level to level `k` (1-based among the non-baseline levels).
    Late { k: usize },
    /// Policy effect of `p -> p + epsilon`, per unit of shifted mass.
    AdditivePrte { epsilon: f64 },
    /// Policy effect of `p -> (1 + epsilon) p`, per unit of shifted mass.
    ProportionalPrte { epsilon: f64 },
    /// Policy effect of a smoothed propensity corridor `[lo, hi]`
    /// (softmin/softmax cap with sharpness `phi`).
    QuotaPrte { lo: f64, hi: f64, phi: f64 },
    /// Marginal limit of the additive policy effect.
    AdditiveMprte,
    /// Marginal limit of the proportional policy effect.
    ProportionalMprte,
}

/// Counterfactual propensity transforms for policy targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PolicySpec {
    Additive { epsilon: f64 },
    Proportional { epsilon: f64 },
    Quota { lo: f64, hi: f64, phi: f64 },
}

/// A target weight `c` together with the `(p, q)` gradients of its
/// treated-arm block.
#[derive(Debug, Clone)]
pub struct WeightVector {
    /// Full weight vector `(c_1', -c_1')'`, length `2(M+1)`.
    pub c: DVector<f64>,
    pub target: Target,
    /// Jacobian of the treated-arm weights in `p`, `(M+1) x (K+1)`.
    pub grad_p: DMatrix<f64>,
    /// Jacobian of the treated-arm weights in `q`, `(M+1) x (K+1)`.
    pub grad_q: DMatrix<f64>,
}

impl WeightVector {
    /// Jacobian of the full weight vector in `p`, `2(M+1) x (K+1)`
    /// (untreated block rows are the negated treated rows).
    pub fn full_grad_p(&self) -> DMatrix<f64> {
        stack_negated(&self.grad_p)
    }

    /// Jacobian of the full weight vector in `q`.
    pub fn full_grad_q(&self) -> DMatrix<f64> {
        stack_negated(&self.grad_q)
    }
}

fn stack_negated(g: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = g.shape();
    let mut out = DMatrix::zeros(2 * r, c);
    out.view_mut((0, 0), (r, c)).copy_from(g);
    out.view_mut((r, 0), (r, c)).copy_from(&(-g));
    out
}

fn logsumexp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn validate_policy(policy: &PolicySpec) -> Result<()> {
    match *policy {
        PolicySpec::Additive { epsilon } => {
            if !epsilon.is_finite() {
                return Err(Error::Config("additive policy shift must be finite".into()));
            }
        }
        PolicySpec::Proportional { epsilon } => {
            if !epsilon.is_finite() || epsilon <= -1.0 {
                return Err(Error::Config("proportional policy factor must exceed -1".into()));
            }
        }
        PolicySpec::Quota { lo, hi, phi } => {
            if !(0.0..1.0).contains(&lo) || !(lo < hi) || hi > 1.0 || !(phi > 0.0) {
                return Err(Error::Config(
                    "quota policy needs 0 <= lo < hi <= 1 and sharpness phi > 0".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Counterfactual propensity `f(p)` under a policy; errors when the result
/// leaves (0, 1).
pub fn counterfactual_propensity(policy: &PolicySpec, p: f64) -> Result<f64> {
    validate_policy(policy)?;
    let fp = match *policy {
        PolicySpec::Additive { epsilon } => p + epsilon,
        PolicySpec::Proportional { epsilon } => (1.0 + epsilon) * p,
        PolicySpec::Quota { lo, hi, phi } => {
            // Smoothed clamp of p into [lo, hi]: soft-max with lo, then
            // soft-min with hi, assembled in log space for stability.
            let a = logsumexp2(phi * p, phi * lo);
            -logsumexp2(-a, -phi * hi) / phi
        }
    };
    if !(fp > 0.0 && fp < 1.0) {
        return Err(Error::Data(format!(
            "counterfactual propensity out of range: policy maps p = {p} to {fp}"
        )));
    }
    Ok(fp)
}

/// Derivative of the counterfactual propensity in `p`.
pub fn counterfactual_propensity_deriv(policy: &PolicySpec, p: f64) -> f64 {
    match *policy {
        PolicySpec::Additive { .. } => 1.0,
        PolicySpec::Proportional { epsilon } => 1.0 + epsilon,
        PolicySpec::Quota { lo, hi, phi } => {
            let a = logsumexp2(phi * p, phi * lo);
            logistic(phi * (p - lo)) * logistic(phi * hi - a)
        }
    }
}

/// Antiderivative of `h_m` on [0, 1]: `H_m(x) = (x^(m+1) - x) / (m+1)`.
fn h_antideriv(m: usize, x: f64) -> f64 {
    (x.powi(m as i32 + 1) - x) / (m as f64 + 1.0)
}

fn h_m(m: usize, x: f64) -> f64 {
    x.powi(m as i32) - 1.0 / (m as f64 + 1.0)
}

/// Power-weighted mass moments `S_r = sum_l p_l^r q_l`.
fn s_moment(p: &[f64], q: &[f64], r: usize) -> f64 {
    p.iter().zip(q).map(|(&pl, &ql)| pl.powi(r as i32) * ql).sum()
}

/// Build the weight vector (and its gradients) for a target.
pub fn weight_vector(target: &Target, spec: &MteSpec, stats: &CellStats) -> Result<WeightVector> {
    let m_ord = spec.order;
    let kp1 = stats.n_levels();
    let p = &stats.p_hat;
    let q = &stats.q_hat;
    let mut c1 = DVector::zeros(m_ord + 1);
    c1[0] = 1.0;
    let mut grad_p = DMatrix::zeros(m_ord + 1, kp1);
    let mut grad_q = DMatrix::zeros(m_ord + 1, kp1);

    match *target {
        Target::Ate => {}
        Target::Mte { u } => {
            if !(0.0..=1.0).contains(&u) {
                return Err(Error::Config(format!("MTE evaluation point u = {u} outside [0, 1]")));
            }
            for m in 1..=m_ord {
                c1[m] = h_m(m, u);
            }
        }
        Target::Att => {
            let s1 = s_moment(p, q, 1);
            for m in 1..=m_ord {
                let smp1 = s_moment(p, q, m + 1);
                let mp1 = m as f64 + 1.0;
                c1[m] = (smp1 / s1 - 1.0) / mp1;
                for l in 0..kp1 {
                    grad_p[(m, l)] = q[l] * (p[l].powi(m as i32) / s1 - smp1 / (mp1 * s1 * s1));
                    grad_q[(m, l)] = p[l] * (p[l].powi(m as i32) * s1 - smp1) / (mp1 * s1 * s1);
                }
            }
        }
        Target::Atu => {
            let s1 = s_moment(p, q, 1);
            let om = 1.0 - s1;
            if om.abs() < 1e-12 {
                return Err(Error::Data("no untreated mass: P(D=0) is zero".into()));
            }
            for m in 1..=m_ord {
                let smp1 = s_moment(p, q, m + 1);
                let mp1 = m as f64 + 1.0;
                let n_num = s1 - smp1;
                c1[m] = n_num / (mp1 * om);
                for l in 0..kp1 {
                    let pm = p[l].powi(m as i32);
                    grad_p[(m, l)] =
                        q[l] * ((1.0 - mp1 * pm) * om + n_num) / (mp1 * om * om);
                    grad_q[(m, l)] =
                        ((p[l] - p[l] * pm) * om + n_num * p[l]) / (mp1 * om * om);
                }
            }
        }
        Target::Late { k } => {
            if k == 0 || k >= kp1 {
                return Err(Error::Config(format!(
                    "LATE contrast level k = {k} outside 1..={}",
                    kp1 - 1
                )));
            }
            let (p0, pk) = (p[0], p[k]);
            if (pk - p0).abs() < 1e-8 {
                return Err(Error::Data(format!(
                    "degenerate complier group: p(z_{k}) = p(z_0) = {pk} within tolerance"
                )));
            }
            for m in 1..=m_ord {
                let mp1 = m as f64 + 1.0;
                let mut s = 0.0;
                for j in 0..=m {
                    s += pk.powi(j as i32) * p0.powi((m - j) as i32);
                }
                c1[m] = (s - 1.0) / mp1;
                let mut dk = 0.0;
                for j in 1..=m {
                    dk += j as f64 * pk.powi(j as i32 - 1) * p0.powi((m - j) as i32);
                }
                let mut d0 = 0.0;
                for j in 0..m {
                    d0 += (m - j) as f64 * pk.powi(j as i32) * p0.powi((m - j) as i32 - 1);
                }
                grad_p[(m, k)] = dk / mp1;
                grad_p[(m, 0)] = d0 / mp1;
            }
        }
        Target::AdditivePrte { epsilon } => {
            prte_weights(&PolicySpec::Additive { epsilon }, m_ord, p, q, &mut c1, &mut grad_p, &mut grad_q)?
        }
        Target::ProportionalPrte { epsilon } => prte_weights(
            &PolicySpec::Proportional { epsilon },
            m_ord,
            p,
            q,
            &mut c1,
            &mut grad_p,
            &mut grad_q,
        )?,
        Target::QuotaPrte { lo, hi, phi } => prte_weights(
            &PolicySpec::Quota { lo, hi, phi },
            m_ord,
            p,
            q,
            &mut c1,
            &mut grad_p,
            &mut grad_q,
        )?,
        Target::AdditiveMprte => {
            // Small-shift limit of the additive policy: the average
            // marginal effect weight E[h_m(p(Z))].
            for m in 1..=m_ord {
                c1[m] = p.iter().zip(q).map(|(&pl, &ql)| ql * h_m(m, pl)).sum();
                for l in 0..kp1 {
                    grad_p[(m, l)] = q[l] * m as f64 * p[l].powi(m as i32 - 1);
                    grad_q[(m, l)] = h_m(m, p[l]);
                }
            }
        }
        Target::ProportionalMprte => {
            // Small-shift limit of the proportional policy:
            // E[p h_m(p)] / E[p].
            let s1 = s_moment(p, q, 1);
            for m in 1..=m_ord {
                let smp1 = s_moment(p, q, m + 1);
                let mp1 = m as f64 + 1.0;
                c1[m] = smp1 / s1 - 1.0 / mp1;
                for l in 0..kp1 {
                    let pm = p[l].powi(m as i32);
                    grad_p[(m, l)] = q[l] * (mp1 * pm * s1 - smp1) / (s1 * s1);
                    grad_q[(m, l)] = p[l] * (pm * s1 - smp1) / (s1 * s1);
                }
            }
        }
    }

    let dim = 2 * (m_ord + 1);
    let mut c = DVector::zeros(dim);
    for m in 0..=m_ord {
        c[m] = c1[m];
        c[m_ord + 1 + m] = -c1[m];
    }
    Ok(WeightVector { c, target: *target, grad_p, grad_q })
}

/// Shared machinery for policy targets: weights are ratios of shifted-mass
/// integrals, `c_m = sum_l q_l (H_m(f(p_l)) - H_m(p_l)) / sum_l q_l (f(p_l) - p_l)`.
fn prte_weights(
    policy: &PolicySpec,
    m_ord: usize,
    p: &[f64],
    q: &[f64],
    c1: &mut DVector<f64>,
    grad_p: &mut DMatrix<f64>,
    grad_q: &mut DMatrix<f64>,
) -> Result<()> {
    let kp1 = p.len();
    let fp: Vec<f64> = p.iter().map(|&pl| counterfactual_propensity(policy, pl)).collect::<Result<_>>()?;
    let fderiv: Vec<f64> = p.iter().map(|&pl| counterfactual_propensity_deriv(policy, pl)).collect();
    let den: f64 = (0..kp1).map(|l| q[l] * (fp[l] - p[l])).sum();
    if den.abs() < 1e-12 {
        return Err(Error::Data(
            "null policy: counterfactual propensities equal the status quo on average".into(),
        ));
    }
    for m in 1..=m_ord {
        let num: f64 = (0..kp1).map(|l| q[l] * (h_antideriv(m, fp[l]) - h_antideriv(m, p[l]))).sum();
        c1[m] = num / den;
        for l in 0..kp1 {
            let dnum_dp = q[l] * (h_m(m, fp[l]) * fderiv[l] - h_m(m, p[l]));
            let dden_dp = q[l] * (fderiv[l] - 1.0);
            grad_p[(m, l)] = (dnum_dp * den - num * dden_dp) / (den * den);
            let dnum_dq = h_antideriv(m, fp[l]) - h_antideriv(m, p[l]);
            let dden_dq = fp[l] - p[l];
            grad_q[(m, l)] = (dnum_dq * den - num * dden_dq) / (den * den);
        }
    }
    Ok(())
}

/// The `(p, q)` gradients of the treated-arm weights for a target.
pub fn weight_gradients(
    target: &Target,
    spec: &MteSpec,
    stats: &CellStats,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let w = weight_vector(target, spec, stats)?;
    Ok((w.grad_p, w.grad_q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::basis_h;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn spec(order: usize) -> MteSpec {
        MteSpec::polynomial(order).unwrap()
    }

    fn stats(p: &[f64], q: &[f64]) -> CellStats {
        CellStats::from_population(
            p,
            q,
            &vec![0.0; p.len()],
            &vec![0.0; p.len()],
            &vec![1.0; p.len()],
            &vec![1.0; p.len()],
            1000,
        )
    }

    #[test]
    fn ate_and_mte_weights() {
        let s = spec(2);
        let st = stats(&[0.3, 0.7], &[0.5, 0.5]);
        let w = weight_vector(&Target::Ate, &s, &st).unwrap();
        assert_eq!(w.c.as_slice(), &[1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
        assert_eq!(w.grad_p.amax(), 0.0);

        let u = 0.35;
        let wm = weight_vector(&Target::Mte { u }, &s, &st).unwrap();
        for m in 1..=2 {
            assert_abs_diff_eq!(wm.c[m], basis_h(&s, m, u), epsilon = 1e-15);
            assert_abs_diff_eq!(wm.c[3 + m], -basis_h(&s, m, u), epsilon = 1e-15);
        }
    }

    #[test]
    fn att_balanced_example() {
        let s = spec(1);
        let st = stats(&[0.5, 0.5], &[0.5, 0.5]);
        let w = weight_vector(&Target::Att, &s, &st).unwrap();
        assert_abs_diff_eq!(w.c[1], -0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(w.c[0], 1.0, epsilon = 0.0);
    }

    #[test]
    fn late_weights_and_gradient() {
        let s = spec(1);
        let st = stats(&[0.2, 0.8], &[0.5, 0.5]);
        let w = weight_vector(&Target::Late { k: 1 }, &s, &st).unwrap();
        // Linear LATE weight (p0 + pk - 1) / 2 vanishes at p0 + pk = 1.
        assert_abs_diff_eq!(w.c[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w.grad_p[(1, 1)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w.grad_p[(1, 0)], 0.5, epsilon = 1e-15);
        assert_eq!(w.grad_q.amax(), 0.0);

        let degenerate = stats(&[0.4, 0.4], &[0.5, 0.5]);
        let err = weight_vector(&Target::Late { k: 1 }, &s, &degenerate).unwrap_err();
        assert!(err.to_string().contains("degenerate complier group"), "{err}");
    }

    #[test]
    fn quota_transform_tracks_the_corridor() {
        let policy = PolicySpec::Quota { lo: 0.1, hi: 1.0, phi: 30.0 };
        // Below the floor the transform pulls p up to ~lo.
        let f = counterfactual_propensity(&policy, 0.05).unwrap();
        assert!((f - 0.1).abs() < 0.01, "f = {f}");
        // Monotone nondecreasing on a fine grid.
        let mut prev = 0.0;
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let fp = counterfactual_propensity(&policy, p).unwrap();
            assert!(fp >= prev - 1e-12, "non-monotone at p = {p}");
            prev = fp;
        }
        // Derivative matches finite differences.
        for &p in &[0.05, 0.09, 0.11, 0.4, 0.9] {
            let h = 1e-6;
            let fd = (counterfactual_propensity(&policy, p + h).unwrap()
                - counterfactual_propensity(&policy, p - h).unwrap())
                / (2.0 * h);
            assert_abs_diff_eq!(counterfactual_propensity_deriv(&policy, p), fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn out_of_range_and_null_policies_error() {
        let err = counterfactual_propensity(&PolicySpec::Additive { epsilon: 0.5 }, 0.8).unwrap_err();
        assert!(err.to_string().contains("counterfactual propensity out of range"), "{err}");

        let s = spec(1);
        let st = stats(&[0.3, 0.6], &[0.5, 0.5]);
        let err2 =
            weight_vector(&Target::AdditivePrte { epsilon: 0.0 }, &s, &st).unwrap_err();
        assert!(err2.to_string().contains("null policy"), "{err2}");
    }

    #[test]
    fn mprte_limits_match_small_shift_policies() {
        let s = spec(3);
        let st = stats(&[0.25, 0.5, 0.8], &[0.3, 0.4, 0.3]);
        let eps = 1e-6;
        let add = weight_vector(&Target::AdditivePrte { epsilon: eps }, &s, &st).unwrap();
        let add_lim = weight_vector(&Target::AdditiveMprte, &s, &st).unwrap();
        let prop = weight_vector(&Target::ProportionalPrte { epsilon: eps }, &s, &st).unwrap();
        let prop_lim = weight_vector(&Target::ProportionalMprte, &s, &st).unwrap();
        for m in 1..=3 {
            assert_abs_diff_eq!(add.c[m], add_lim.c[m], epsilon = 1e-4);
            assert_abs_diff_eq!(prop.c[m], prop_lim.c[m], epsilon = 1e-4);
        }
    }

    #[test]
    fn closed_form_weights_match_quadrature() {
        // Each weight equals a ratio of integrals of h_m over selection
        // regions; check the closed forms against Simpson quadrature.
        let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| -> f64 {
            let n = 2000;
            let h = (b - a) / n as f64;
            let mut s = f(a) + f(b);
            for i in 1..n {
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
            }
            s * h / 3.0
        };
        let s = spec(3);
        let p = [0.3, 0.6, 0.9];
        let q = [0.2, 0.5, 0.3];
        let st = stats(&p, &q);

        let att = weight_vector(&Target::Att, &s, &st).unwrap();
        let atu = weight_vector(&Target::Atu, &s, &st).unwrap();
        let late = weight_vector(&Target::Late { k: 2 }, &s, &st).unwrap();
        let pd1: f64 = p.iter().zip(&q).map(|(&a, &b)| a * b).sum();
        for m in 1..=3 {
            let hm = |u: f64| basis_h(&s, m, u);
            let att_num: f64 =
                p.iter().zip(&q).map(|(&pl, &ql)| ql * simpson(&hm, 0.0, pl)).sum();
            assert_abs_diff_eq!(att.c[m], att_num / pd1, epsilon = 1e-10);
            let atu_num: f64 =
                p.iter().zip(&q).map(|(&pl, &ql)| ql * simpson(&hm, pl, 1.0)).sum();
            assert_abs_diff_eq!(atu.c[m], atu_num / (1.0 - pd1), epsilon = 1e-10);
            let late_num = simpson(&hm, p[0], p[2]) / (p[2] - p[0]);
            assert_abs_diff_eq!(late.c[m], late_num, epsilon = 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::rng_for(20, &[0x6ead]);
        let s = spec(2);
        let targets = [
            Target::Att,
            Target::Atu,
            Target::Late { k: 2 },
            Target::AdditivePrte { epsilon: 0.04 },
            Target::ProportionalPrte { epsilon: 0.1 },
            Target::QuotaPrte { lo: 0.15, hi: 0.9, phi: 25.0 },
            Target::AdditiveMprte,
            Target::ProportionalMprte,
        ];
        for _ in 0..20 {
            let p: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..0.85)).collect();
            let mut q: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..1.0)).collect();
            let qs: f64 = q.iter().sum();
            q.iter_mut().for_each(|x| *x /= qs);
            let st = stats(&p, &q);
            for target in &targets {
                // The quota weights have curvature of order φ³ near the
                // sigmoid knees, so central differences at 1e-6 carry
                // visible truncation error there; a tighter step fixes the
                // truncation while roundoff stays negligible at this
                // gradient scale.
                let h = match target {
                    Target::QuotaPrte { .. } => 1e-7,
                    _ => 1e-6,
                };
                let w = weight_vector(target, &s, &st).unwrap();
                for l in 0..3 {
                    let mut p_hi = p.clone();
                    let mut p_lo = p.clone();
                    p_hi[l] += h;
                    p_lo[l] -= h;
                    let w_hi = weight_vector(target, &s, &stats(&p_hi, &q)).unwrap();
                    let w_lo = weight_vector(target, &s, &stats(&p_lo, &q)).unwrap();
                    let mut q_hi = q.clone();
                    let mut q_lo = q.clone();
                    q_hi[l] += h;
                    q_lo[l] -= h;
                    let wq_hi = weight_vector(target, &s, &stats(&p, &q_hi)).unwrap();
                    let wq_lo = weight_vector(target, &s, &stats(&p, &q_lo)).unwrap();
                    for m in 0..=2 {
                        let fd_p = (w_hi.c[m] - w_lo.c[m]) / (2.0 * h);
                        let fd_q = (wq_hi.c[m] - wq_lo.c[m]) / (2.0 * h);
                        // Tolerance scales with magnitude: central differences
                        // carry ~1e-8 relative noise on steep weights.
                        let tol_p = 1e-5 * (1.0 + w.grad_p[(m, l)].abs());
                        let tol_q = 1e-5 * (1.0 + w.grad_q[(m, l)].abs());
                        assert_abs_diff_eq!(w.grad_p[(m, l)], fd_p, epsilon = tol_p);
                        assert_abs_diff_eq!(w.grad_q[(m, l)], fd_q, epsilon = tol_q);
                    }
                }
            }
        }
    }

    #[test]
    fn full_gradients_stack_with_negation() {
        let s = spec(1);
        let st = stats(&[0.3, 0.7], &[0.4, 0.6]);
        let w = weight_vector(&Target::Att, &s, &st).unwrap();
        let full = w.full_grad_p();
        assert_eq!(full.shape(), (4, 2));
        for l in 0..2 {
            assert_abs_diff_eq!(full[(1, l)], -full[(3, l)], epsilon = 0.0);
            assert_abs_diff_eq!(full[(1, l)], w.grad_p[(1, l)], epsilon = 0.0);
        }
    }
}
