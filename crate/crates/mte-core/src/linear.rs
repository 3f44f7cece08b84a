//! Identification-robust inference in the linear (first-order) MTE model.
//!
//! With a linear MTE the target `lambda = c' theta` satisfies, for every
//! non-baseline instrument level `z_k`, a scalar moment restriction that is
//! linear in `lambda` and free of the remaining model parameters:
//!
//! ```text
//! g_k(lambda) = [p(z_k) - p(z_0)] lambda - c_mu D_mu(z_0, z_k) - c_rho D_rho(z_0, z_k)
//! ```
//!
//! where `D_mu`, `D_rho` are contrasts of cell means and propensities. Each
//! moment yields an Anderson–Rubin statistic that is chi-square(1) no matter
//! how weak the instrument is; the efficient combination across levels gives
//! a Wald statistic whose critical value must be simulated conditionally on
//! a sufficient statistic for the (possibly drifting) first stage.
//!
//! When the weight itself is estimated from the data (ATT, LATE, policy
//! effects), extra delta-method terms propagate the weight's sampling noise
//! into the moment variance; the `estimated_weights` flag switches every
//! statistic to those corrected forms.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::MteSpec;
use crate::data::{covariance_estimates, CellStats, CovarianceSet};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::rng_for;
use crate::weights::{weight_vector, Target};

/// Default number of simulation draws for conditional critical values.
pub const DEFAULT_DRAWS: usize = 2000;

/// Everything a linear-model test needs: cell statistics, their covariance
/// estimates, and the scalar weight components `(c_mu, c_rho)` of
/// `c = (c_mu, c_rho, -c_mu, -c_rho)'`.
#[derive(Debug, Clone)]
pub struct LinearContext {
    pub stats: CellStats,
    pub cov: CovarianceSet,
    pub c_mu: f64,
    pub c_rho: f64,
    /// Treat the weight as estimated: adds delta-method terms for the
    /// sampling noise of `(c_mu, c_rho)` to every variance.
    pub estimated_weights: bool,
    /// Weight Jacobians in `(p, q)` — rows `(c_mu, c_rho)`, one column per
    /// instrument level. Required when `estimated_weights` is set.
    pub grads: Option<(DMatrix<f64>, DMatrix<f64>)>,
    /// Root seed for simulated critical values.
    pub seed: u64,
}

impl LinearContext {
    /// Context for a fixed (non-random) weight vector.
    pub fn new(stats: CellStats, c_mu: f64, c_rho: f64) -> Result<Self> {
        if c_mu == 0.0 && c_rho == 0.0 {
            return Err(Error::Config("weight (c_mu, c_rho) must be nonzero".into()));
        }
        let cov = covariance_estimates(&stats)?;
        Ok(LinearContext { stats, cov, c_mu, c_rho, estimated_weights: false, grads: None, seed: 0 })
    }

    /// Context for a named target in an order-1 model. Targets whose weights
    /// depend on `(p, q)` are automatically flagged as estimated and carry
    /// their analytic weight Jacobians.
    pub fn with_target(stats: CellStats, target: &Target, spec: &MteSpec) -> Result<Self> {
        if spec.order != 1 {
            return Err(Error::Config(format!(
                "pairwise moment inference requires a linear model (order 1), got order {}",
                spec.order
            )));
        }
        let w = weight_vector(target, spec, &stats)?;
        let estimated = matches!(
            target,
            Target::Att
                | Target::Atu
                | Target::Late { .. }
                | Target::AdditivePrte { .. }
                | Target::ProportionalPrte { .. }
                | Target::QuotaPrte { .. }
                | Target::AdditiveMprte
                | Target::ProportionalMprte
        );
        let mut ctx = LinearContext::new(stats, w.c[0], w.c[1])?;
        ctx.estimated_weights = estimated;
        ctx.grads = Some((w.grad_p, w.grad_q));
        Ok(ctx)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Number of non-baseline levels `K`.
    pub fn k(&self) -> usize {
        self.stats.n_levels() - 1
    }

    fn delta_mu(&self, k: usize) -> f64 {
        let s = &self.stats;
        s.p_hat[k] * (s.beta1_hat[0] - s.beta0_hat[0]) - s.p_hat[0] * (s.beta1_hat[k] - s.beta0_hat[k])
            + s.beta1_hat[k]
            - s.beta1_hat[0]
    }

    fn delta_rho(&self, k: usize) -> f64 {
        let s = &self.stats;
        2.0 * (s.beta0_hat[0] - s.beta1_hat[0] + s.beta1_hat[k] - s.beta0_hat[k])
    }

    /// First-stage contrasts `pi_k = p(z_k) - p(z_0)`.
    pub fn pi(&self) -> DVector<f64> {
        let p = &self.stats.p_hat;
        DVector::from_fn(self.k(), |i, _| p[i + 1] - p[0])
    }

    /// Reduced-form contrasts `gamma_k = c_mu D_mu + c_rho D_rho`.
    pub fn gamma(&self) -> DVector<f64> {
        DVector::from_fn(self.k(), |i, _| {
            self.c_mu * self.delta_mu(i + 1) + self.c_rho * self.delta_rho(i + 1)
        })
    }

    /// Stacked moment vector `g(lambda) = pi lambda - gamma`.
    pub fn moment_vec(&self, lambda: f64) -> DVector<f64> {
        self.pi() * lambda - self.gamma()
    }

    /// Jacobian of `g(lambda)` in the propensity vector, `K x (K+1)`;
    /// includes the estimated-weight correction when flagged.
    fn jac_p(&self, lambda: f64) -> DMatrix<f64> {
        let s = &self.stats;
        let kk = self.k();
        let mut j = DMatrix::zeros(kk, kk + 1);
        for i in 0..kk {
            let k = i + 1;
            j[(i, 0)] = -lambda + (s.beta1_hat[k] - s.beta0_hat[k]) * self.c_mu;
            j[(i, k)] = lambda - (s.beta1_hat[0] - s.beta0_hat[0]) * self.c_mu;
        }
        if self.estimated_weights {
            let (gp, _) = self.grads.as_ref().expect("estimated weights need gradients");
            for i in 0..kk {
                let (dmu, drho) = (self.delta_mu(i + 1), self.delta_rho(i + 1));
                for l in 0..=kk {
                    j[(i, l)] -= dmu * gp[(0, l)] + drho * gp[(1, l)];
                }
            }
        }
        j
    }

    /// Jacobian of `g(lambda)` in the cell masses; zero unless the weight is
    /// estimated (fixed weights do not involve `q`).
    fn jac_q(&self) -> DMatrix<f64> {
        let kk = self.k();
        let mut j = DMatrix::zeros(kk, kk + 1);
        if self.estimated_weights {
            let (_, gq) = self.grads.as_ref().expect("estimated weights need gradients");
            for i in 0..kk {
                let (dmu, drho) = (self.delta_mu(i + 1), self.delta_rho(i + 1));
                for l in 0..=kk {
                    j[(i, l)] = -(dmu * gq[(0, l)] + drho * gq[(1, l)]);
                }
            }
        }
        j
    }

    fn jac_beta1(&self) -> DMatrix<f64> {
        let s = &self.stats;
        let kk = self.k();
        let mut j = DMatrix::zeros(kk, kk + 1);
        for i in 0..kk {
            let k = i + 1;
            j[(i, 0)] = (1.0 - s.p_hat[k]) * self.c_mu + 2.0 * self.c_rho;
            j[(i, k)] = -(1.0 - s.p_hat[0]) * self.c_mu - 2.0 * self.c_rho;
        }
        j
    }

    fn jac_beta0(&self) -> DMatrix<f64> {
        let s = &self.stats;
        let kk = self.k();
        let mut j = DMatrix::zeros(kk, kk + 1);
        for i in 0..kk {
            let k = i + 1;
            j[(i, 0)] = s.p_hat[k] * self.c_mu - 2.0 * self.c_rho;
            j[(i, k)] = -s.p_hat[0] * self.c_mu + 2.0 * self.c_rho;
        }
        j
    }

    /// Delta-method covariance of `sqrt(n) g(lambda)`, `K x K`.
    pub fn s_matrix(&self, lambda: f64) -> DMatrix<f64> {
        let jp = self.jac_p(lambda);
        let jb1 = self.jac_beta1();
        let jb0 = self.jac_beta0();
        let mut s = &jp * &self.cov.sigma_p * jp.transpose()
            + &jb1 * &self.cov.sigma_beta1 * jb1.transpose()
            + &jb0 * &self.cov.sigma_beta0 * jb0.transpose();
        if self.estimated_weights {
            let jq = self.jac_q();
            s += &jq * &self.cov.sigma_q * jq.transpose();
        }
        linalg::symmetrize(&s)
    }
}

/// The scalar moment `g_k(lambda)` for the instrument pair `(z_0, z_k)`.
pub fn moment_g(ctx: &LinearContext, k: usize, lambda: f64) -> Result<f64> {
    if k == 0 || k > ctx.k() {
        return Err(Error::Config(format!("moment index k = {k} outside 1..={}", ctx.k())));
    }
    Ok((ctx.stats.p_hat[k] - ctx.stats.p_hat[0]) * lambda
        - ctx.c_mu * ctx.delta_mu(k)
        - ctx.c_rho * ctx.delta_rho(k))
}

/// Outcome of a single hypothesis test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub critical_value: f64,
    pub reject: bool,
    pub level: f64,
    /// Method-specific extras (draw counts, moment index, ...).
    pub meta: serde_json::Value,
}

impl TestResult {
    pub(crate) fn new(statistic: f64, critical_value: f64, level: f64, meta: serde_json::Value) -> Self {
        TestResult { statistic, critical_value, reject: statistic > critical_value, level, meta }
    }
}

fn check_level(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("test level alpha = {alpha} outside (0, 1)")));
    }
    Ok(())
}

/// Anderson–Rubin test of `c' theta = lambda` from the single pair
/// `(z_0, z_k)`; chi-square(1) critical value, valid at any identification
/// strength.
pub fn ar_test(ctx: &LinearContext, k: usize, lambda: f64, alpha: f64) -> Result<TestResult> {
    check_level(alpha)?;
    let g = moment_g(ctx, k, lambda)?;
    let s = ctx.s_matrix(lambda);
    let s_kk = s[(k - 1, k - 1)];
    if !(s_kk > 0.0) {
        return Err(Error::Numerical(format!(
            "degenerate moment variance at pair k = {k}: s_kk = {s_kk}; requires nonzero weight \
             and positive within-cell variances"
        )));
    }
    let stat = ctx.stats.n as f64 * g * g / s_kk;
    let crit = linalg::chi2_quantile(1.0, 1.0 - alpha);
    Ok(TestResult::new(stat, crit, alpha, serde_json::json!({ "method": "ar", "k": k })))
}

/// The efficient-combination Wald statistic `W_n(lambda)` and the pieces the
/// conditional critical value is built from.
struct WaldParts {
    w_stat: f64,
    /// `h = sqrt(n) pi - J_pi Sigma_p J_p' S^{-1} sqrt(n) g` — asymptotically
    /// independent of the moment, carries the first-stage strength.
    h: DVector<f64>,
    /// `J_pi Sigma_p J_p'` — the coupling between first stage and moment.
    coupling: DMatrix<f64>,
    s_inv: DMatrix<f64>,
    s_inv_sqrt: DMatrix<f64>,
}

fn wald_parts(ctx: &LinearContext, lambda: f64) -> Result<WaldParts> {
    let n = ctx.stats.n as f64;
    let g = ctx.moment_vec(lambda);
    let pi = ctx.pi();
    let s = ctx.s_matrix(lambda);
    let (s_inv, s_inv_sqrt) = linalg::sym_inv_and_inv_sqrt(&s, "moment variance S(lambda)")?;

    let sig = &s_inv * &g;
    let sip = &s_inv * &pi;
    let denom = pi.dot(&sip);
    let w_stat = n * (pi.dot(&sig)).powi(2) / denom;

    // d pi / d p' = [-1_K | I_K].
    let kk = ctx.k();
    let mut jpi = DMatrix::zeros(kk, kk + 1);
    for i in 0..kk {
        jpi[(i, 0)] = -1.0;
        jpi[(i, i + 1)] = 1.0;
    }
    let coupling = &jpi * &ctx.cov.sigma_p * ctx.jac_p(lambda).transpose();
    let h = pi.scale(n.sqrt()) - &coupling * &s_inv * g.scale(n.sqrt());
    Ok(WaldParts { w_stat, h, coupling, s_inv, s_inv_sqrt })
}

/// Simulated-draw matrix for conditional critical values: `K x draws`
/// standard normals, derived from the context seed alone so repeated calls
/// (e.g. across a grid of `lambda` values) share common random numbers.
fn eta_draws(ctx: &LinearContext, draws: usize) -> DMatrix<f64> {
    let mut rng = rng_for(ctx.seed, &[0x11ea8]);
    DMatrix::from_fn(ctx.k(), draws, |_, _| StandardNormal.sample(&mut rng))
}

/// Conditional Wald test: compares `W_n(lambda)` against the simulated
/// `1 - alpha` quantile of its distribution given the sufficient statistic
/// for first-stage strength.
pub fn cond_wald_test(
    ctx: &LinearContext,
    lambda: f64,
    alpha: f64,
    draws: usize,
) -> Result<TestResult> {
    check_level(alpha)?;
    if draws < 500 {
        return Err(Error::Config(format!("conditional critical value needs >= 500 draws, got {draws}")));
    }
    let parts = wald_parts(ctx, lambda)?;
    let eta = eta_draws(ctx, draws);
    let mut sim = Vec::with_capacity(draws);
    let proj = &parts.coupling * &parts.s_inv_sqrt;
    for j in 0..draws {
        let e = eta.column(j);
        let pi_s = &parts.h + &proj * e;
        let num = pi_s.dot(&(&parts.s_inv_sqrt * e));
        let den = pi_s.dot(&(&parts.s_inv * &pi_s));
        sim.push(num * num / den);
    }
    let crit = linalg::empirical_quantile(&sim, 1.0 - alpha);
    Ok(TestResult::new(
        parts.w_stat,
        crit,
        alpha,
        serde_json::json!({
            "method": "cond_wald",
            "draws": draws,
            "h": parts.h.as_slice(),
        }),
    ))
}

/// Classical Wald test: same statistic, fixed chi-square(1) critical value.
/// Valid only under strong identification; kept for power comparisons.
pub fn wald_test(ctx: &LinearContext, lambda: f64, alpha: f64) -> Result<TestResult> {
    check_level(alpha)?;
    let parts = wald_parts(ctx, lambda)?;
    let crit = linalg::chi2_quantile(1.0, 1.0 - alpha);
    Ok(TestResult::new(parts.w_stat, crit, alpha, serde_json::json!({ "method": "wald" })))
}

/// Two-step point estimate and standard error for `lambda`: a preliminary
/// unweighted minimum-distance fit pins the weighting matrix, then
/// `lambda_hat = (pi' S^{-1} gamma) / (pi' S^{-1} pi)`.
pub fn wald_point(ctx: &LinearContext) -> Result<(f64, f64)> {
    let pi = ctx.pi();
    let gamma = ctx.gamma();
    let denom0 = pi.dot(&pi);
    if denom0 <= 0.0 {
        return Err(Error::Numerical("all propensity contrasts are zero".into()));
    }
    let lambda0 = pi.dot(&gamma) / denom0;
    let s = ctx.s_matrix(lambda0);
    let s_inv = linalg::sym_inverse(&s, "moment variance S(lambda)")?;
    let sip = &s_inv * &pi;
    let denom = pi.dot(&sip);
    let lambda_hat = gamma.dot(&sip) / denom;
    let se = 1.0 / (ctx.stats.n as f64 * denom).sqrt();
    Ok((lambda_hat, se))
}

/// A uniform grid of candidate `lambda` values for test inversion.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn new(lo: f64, hi: f64, points: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("grid [{lo}, {hi}] is not a finite interval")));
        }
        if points < 2 {
            return Err(Error::Config(format!("grid needs at least 2 points, got {points}")));
        }
        Ok(GridSpec { lo, hi, points })
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }

    pub fn value(&self, i: usize) -> f64 {
        self.lo + self.step() * i as f64
    }
}

/// A confidence set produced by test inversion: the accepted grid region as
/// disjoint intervals, plus its convex hull.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceSet {
    /// Maximal runs of non-rejected values, boundaries refined by bisection.
    pub intervals: Vec<[f64; 2]>,
    /// Convex hull `[min, max]` of the accepted set, if nonempty.
    pub hull: Option<[f64; 2]>,
    /// No grid point was accepted.
    pub empty: bool,
    /// The accepted set touches the grid boundary (a sign the grid should
    /// be widened — the set may extend beyond it).
    pub open_ended: bool,
    pub grid: GridSpec,
}

/// Invert a test over a grid: collect the accepted values, refine each
/// accept/reject boundary by bisection to `step / 100`, and merge into
/// intervals.
pub fn invert_ci<F>(test: F, grid: &GridSpec) -> Result<ConfidenceSet>
where
    F: Fn(f64) -> Result<TestResult> + Sync,
{
    GridSpec::new(grid.lo, grid.hi, grid.points)?;
    if grid.points < 50 {
        return Err(Error::Config(format!(
            "test inversion needs at least 50 grid points for boundary refinement, got {}",
            grid.points
        )));
    }
    use rayon::prelude::*;
    let rejects: Vec<bool> = (0..grid.points)
        .into_par_iter()
        .map(|i| test(grid.value(i)).map(|t| t.reject))
        .collect::<Result<_>>()?;

    let tol = grid.step() / 100.0;
    // Bisect between an accepted and a rejected point for the boundary.
    let refine = |mut acc: f64, mut rej: f64| -> Result<f64> {
        while (acc - rej).abs() > tol {
            let mid = 0.5 * (acc + rej);
            if test(mid)?.reject {
                rej = mid;
            } else {
                acc = mid;
            }
        }
        Ok(acc)
    };

    let mut intervals = Vec::new();
    let mut i = 0;
    while i < grid.points {
        if !rejects[i] {
            let start = i;
            while i + 1 < grid.points && !rejects[i + 1] {
                i += 1;
            }
            let mut lo = grid.value(start);
            if start > 0 {
                lo = refine(lo, grid.value(start - 1))?;
            }
            let mut hi = grid.value(i);
            if i + 1 < grid.points {
                hi = refine(hi, grid.value(i + 1))?;
            }
            intervals.push([lo, hi]);
        }
        i += 1;
    }

    let empty = intervals.is_empty();
    let hull = if empty {
        None
    } else {
        Some([intervals[0][0], intervals[intervals.len() - 1][1]])
    };
    let open_ended = !rejects[0] || !rejects[grid.points - 1];
    Ok(ConfidenceSet { intervals, hull, empty, open_ended, grid: *grid })
}

/// Inversion methods surfaced by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CiMethod {
    /// Anderson–Rubin on a single pair (moment index `k`).
    Ar { k: usize },
    /// Conditional Wald across all pairs.
    CondWald,
    /// Classical Wald across all pairs (chi-square critical value).
    Wald,
}

/// Build a confidence set for `lambda` by inverting a test. With no grid
/// supplied, uses the Wald point estimate ± 10 standard errors, widened ×3
/// once if the accepted set touches a boundary.
pub fn linear_ci(
    ctx: &LinearContext,
    method: CiMethod,
    alpha: f64,
    draws: usize,
    grid: Option<GridSpec>,
) -> Result<ConfidenceSet> {
    let test = |lambda: f64| -> Result<TestResult> {
        match method {
            CiMethod::Ar { k } => ar_test(ctx, k, lambda, alpha),
            CiMethod::CondWald => cond_wald_test(ctx, lambda, alpha, draws),
            CiMethod::Wald => wald_test(ctx, lambda, alpha),
        }
    };
    let base = match grid {
        Some(g) => g,
        None => {
            let (point, se) = wald_point(ctx)?;
            GridSpec::new(point - 10.0 * se, point + 10.0 * se, 201)?
        }
    };
    let set = invert_ci(test, &base)?;
    if grid.is_none() && set.open_ended && !set.empty {
        let half = 1.5 * (base.hi - base.lo);
        let center = 0.5 * (base.lo + base.hi);
        let wide = GridSpec::new(center - half, center + half, 3 * base.points - 2)?;
        return invert_ci(test, &wide);
    }
    Ok(set)
}
