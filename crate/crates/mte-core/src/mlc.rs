//! Identification-robust inference for polynomial MTE models of any order.
//!
//! The moment condition stacks every instrument level: `r(θ) = Âθ − β̂`
//! with `Â` built from the estimated propensities. Three statistics share
//! that moment: Anderson–Rubin (`AR`), a modified restricted-LM statistic
//! (`MRLM`) that projects the scaled moment onto a perturbed gradient
//! column, and their linear combination `MLC = MRLM + a · AR`. The test
//! profiles MLC over the null slice `{θ : c'θ = λ}` intersected with the
//! coefficient box and compares against a simulated
//! `(1+a)χ²₁ + aχ²_{2K+1}` quantile, which keeps size under weak or failed
//! identification while tracking the classical Wald test under strong
//! identification.
//!
//! When the target weight is itself estimated (ATT, LATE, policy-relevant
//! weights), the moment variance picks up delta-method terms through a
//! user-chosen split `r ∈ [0, 1]` of the weight perturbation between the
//! two treatment arms; validity holds for every split, so `r = 0.5` is the
//! default.

use std::collections::HashMap;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use once_cell::sync::Lazy;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{build_a, build_h, build_mj, MteSpec};
use crate::data::{covariance_estimates, CellStats, CovarianceSet};
use crate::error::{Error, Result};
use crate::linalg;
use crate::linear::{invert_ci, ConfidenceSet, GridSpec, TestResult};
use crate::optim::{self, OptSpec};
use crate::rng::rng_for;
use crate::weights::WeightVector;

/// Default AR weight in the combination statistic.
pub const DEFAULT_A: f64 = 0.05;
/// Default scale of the gradient perturbation.
pub const DEFAULT_KAPPA: f64 = 1e-6;
/// Default number of mixture draws for critical values.
pub const MIXTURE_DRAWS: usize = 200_000;

const XI_TAG: u64 = 0xd11a;
const MIX_TAG: u64 = 0x315a;
const BOX_PENALTY: f64 = 1e8;
const SLICE_TOL: f64 = 1e-8;

/// Everything a test evaluation needs, fixed up front: data summaries,
/// their covariances, the design pieces, the tuning constants, and the
/// perturbation draw `ξ` (one draw per context, shared by every `θ` probe
/// and every `λ` of a confidence-set inversion so the profiled objective
/// stays continuous).
#[derive(Debug, Clone)]
pub struct MlcContext {
    pub spec: MteSpec,
    pub stats: CellStats,
    pub cov: CovarianceSet,
    /// AR weight `a` in `MRLM + a·AR` (default 0.05).
    pub a: f64,
    /// Perturbation scale (default 1e-6); the draw enters as `κ n^{-1/2} ξ`.
    pub kappa: f64,
    /// Test level.
    pub alpha: f64,
    /// Root seed: fixes `ξ` and the mixture draws.
    pub seed: u64,
    /// Treat the target weight as estimated: the moment variance gains
    /// delta-method terms from the weight's `(p, q)` gradients.
    pub estimated_weights: bool,
    /// Split of the estimated-weight perturbation between arms.
    pub r: f64,
    sigma_beta: DMatrix<f64>,
    design: DMatrix<f64>,
    mj: Vec<DMatrix<f64>>,
    xi: DMatrix<f64>,
}

impl MlcContext {
    pub fn new(spec: MteSpec, stats: CellStats, alpha: f64, seed: u64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("level must be in (0, 1), got {alpha}")));
        }
        if stats.n_levels() < 2 {
            return Err(Error::Config(
                "inference needs at least two instrument levels".into(),
            ));
        }
        let cov = covariance_estimates(&stats)?;
        let sigma_beta = cov.sigma_beta();
        let design = build_a(&spec, &stats.p_hat).a;
        let dim = spec.dim();
        let mj = (1..=dim).map(|j| build_mj(&spec, &stats.p_hat, j)).collect();
        let rows = 2 * stats.n_levels();
        let mut rng = rng_for(seed, &[XI_TAG]);
        let xi = DMatrix::from_iterator(
            rows,
            dim,
            (0..rows * dim).map(|_| StandardNormal.sample(&mut rng)),
        );
        Ok(MlcContext {
            spec,
            stats,
            cov,
            a: DEFAULT_A,
            kappa: DEFAULT_KAPPA,
            alpha,
            seed,
            estimated_weights: false,
            r: 0.5,
            sigma_beta,
            design,
            mj,
            xi,
        })
    }

    /// Override the AR weight (`a = 0` recovers the pure projection test).
    pub fn with_a(mut self, a: f64) -> Result<Self> {
        if !(a.is_finite() && a >= 0.0) {
            return Err(Error::Config(format!("AR weight must be >= 0, got {a}")));
        }
        self.a = a;
        Ok(self)
    }

    pub fn with_kappa(mut self, kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::Config(format!("perturbation scale must be > 0, got {kappa}")));
        }
        self.kappa = kappa;
        Ok(self)
    }

    /// Flag the target weight as estimated with arm split `r`.
    pub fn with_estimated_weights(mut self, r: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("arm split must lie in [0, 1], got {r}")));
        }
        self.estimated_weights = true;
        self.r = r;
        Ok(self)
    }

    /// Number of instrument contrasts `K` (levels minus one).
    pub fn k(&self) -> usize {
        self.stats.n_levels() - 1
    }

    /// Stacked design matrix `Â`, `2(K+1) × 2(M+1)`.
    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn residual(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.design * theta - self.stats.beta_stacked()
    }

    /// Direction along which the estimated-weight perturbation loads:
    /// `-r` on the treated block, `1 - r` on the untreated block.
    fn xi_r(&self) -> DVector<f64> {
        let levels = self.stats.n_levels();
        DVector::from_fn(2 * levels, |i, _| if i < levels { -self.r } else { 1.0 - self.r })
    }

    /// `H(p̂, θ)`, plus the estimated-weight correction `ξ_r (θ'∂_p ĉ)`
    /// when a weight is supplied and the context is flagged.
    fn h_adjusted(&self, theta: &DVector<f64>, weight: Option<&WeightVector>) -> DMatrix<f64> {
        let mut h = build_h(&self.spec, &self.stats.p_hat, theta);
        if self.estimated_weights {
            if let Some(w) = weight {
                let row = theta.transpose() * w.full_grad_p();
                h += self.xi_r() * row;
            }
        }
        h
    }

    fn omega_and_h(
        &self,
        theta: &DVector<f64>,
        weight: Option<&WeightVector>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let h = self.h_adjusted(theta, weight);
        let mut omega = &h * &self.cov.sigma_p * h.transpose() + &self.sigma_beta;
        if self.estimated_weights {
            if let Some(w) = weight {
                let load = self.xi_r() * (theta.transpose() * w.full_grad_q());
                omega += &load * &self.cov.sigma_q * load.transpose();
            }
        }
        (linalg::symmetrize(&omega), h)
    }
}

/// Variance of the scaled moment at `θ`: `H Σ̂_p H' + Σ̂_β`.
pub fn omega_hat(ctx: &MlcContext, theta: &DVector<f64>) -> DMatrix<f64> {
    ctx.omega_and_h(theta, None).0
}

/// The perturbed gradient matrix `D̃(θ)`: columns orthogonalize the design
/// columns against the moment (`d̂_j = â_j − Γ̂_j Ω̂⁻¹ r̂`), then add
/// `κ n^{-1/2} ξ` so the matrix keeps full column rank even when the
/// propensities do not separate the coefficients.
pub fn d_tilde(ctx: &MlcContext, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let (omega, h) = ctx.omega_and_h(theta, None);
    let om_inv = linalg::sym_inverse(&omega, "moment variance")?;
    Ok(d_tilde_from(ctx, theta, &h, &om_inv))
}

fn d_tilde_from(
    ctx: &MlcContext,
    theta: &DVector<f64>,
    h_adj: &DMatrix<f64>,
    om_inv: &DMatrix<f64>,
) -> DMatrix<f64> {
    let gam_core = &ctx.cov.sigma_p * h_adj.transpose();
    let om_resid = om_inv * ctx.residual(theta);
    let mut d = ctx.design.clone();
    for j in 0..ctx.dim() {
        let shift = &ctx.mj[j] * (&gam_core * &om_resid);
        let mut col = d.column_mut(j);
        col -= &shift;
    }
    let scale = ctx.kappa / (ctx.stats.n as f64).sqrt();
    d + scale * &ctx.xi
}

/// The pieces of one statistic evaluation.
#[derive(Debug, Clone)]
pub struct MlcParts {
    /// Anderson–Rubin statistic `n r̂'Ω̂⁻¹r̂`.
    pub ar: f64,
    /// Projection statistic along the perturbed gradient direction.
    pub mrlm: f64,
    /// `MRLM + a · AR`.
    pub mlc: f64,
    pub omega: DMatrix<f64>,
    pub d_tilde: DMatrix<f64>,
}

/// Evaluate AR, MRLM, and MLC at one `θ`. The weight enters through the
/// projection direction `Q̂ = Ω̂^{-1/2} D̃ (D̃'Ω̂⁻¹D̃)⁻¹ c` and, when the
/// context flags estimated weights, through the variance adjustment.
pub fn mlc_parts(ctx: &MlcContext, theta: &DVector<f64>, weight: &WeightVector) -> Result<MlcParts> {
    if theta.len() != ctx.dim() || weight.c.len() != ctx.dim() {
        return Err(Error::Config(format!(
            "theta and weight must have length {}, got {} and {}",
            ctx.dim(),
            theta.len(),
            weight.c.len()
        )));
    }
    let w_opt = ctx.estimated_weights.then_some(weight);
    let (omega, h) = ctx.omega_and_h(theta, w_opt);
    let (om_inv, om_inv_sqrt) = linalg::sym_inv_and_inv_sqrt(&omega, "moment variance")?;
    let resid = ctx.residual(theta);
    let n = ctx.stats.n as f64;
    let ar = n * (&om_inv * &resid).dot(&resid);

    let dt = d_tilde_from(ctx, theta, &h, &om_inv);
    // Q̂ = Ω̂^{-1/2} D̃ (D̃'Ω̂⁻¹D̃)⁻¹ c, computed from a thin QR of
    // B = Ω̂^{-1/2} D̃ as Q R⁻ᵀ c. Under identification failure the
    // κ-perturbation keeps B full rank only barely; the triangular solve
    // tolerates that, while forming the Gram matrix would square the
    // condition number past what f64 can represent.
    let b = &om_inv_sqrt * &dt;
    let qr = b.qr();
    let y = qr.r().transpose().solve_lower_triangular(&weight.c).ok_or_else(|| {
        Error::Numerical(
            "perturbed gradient Gram matrix is numerically singular; rerun with a different seed"
                .into(),
        )
    })?;
    let q_dir = qr.q() * y;
    let qq = q_dir.norm_squared();
    if !(qq.is_finite() && qq > 0.0) {
        return Err(Error::Numerical(
            "projection direction degenerated to zero; rerun with a different seed".into(),
        ));
    }
    let proj = (&om_inv_sqrt * &resid).dot(&q_dir);
    let mrlm = n * proj * proj / qq;
    let mlc = mrlm + ctx.a * ar;
    debug_assert!(mrlm >= -1e-9, "projection statistic must be nonnegative");
    debug_assert!(
        ar - mrlm >= -1e-6 * (1.0 + ar.abs()),
        "AR must dominate the projected statistic (AR = {ar}, MRLM = {mrlm})"
    );
    Ok(MlcParts { ar, mrlm, mlc, omega, d_tilde: dt })
}

/// `MLC_n(θ)` alone.
pub fn mlc_stat(ctx: &MlcContext, theta: &DVector<f64>, weight: &WeightVector) -> Result<f64> {
    mlc_parts(ctx, theta, weight).map(|p| p.mlc)
}

// --- mixture critical values -------------------------------------------

type MixKey = (u64, usize, u64, usize, u64);

static MIX_SAMPLES: Lazy<Mutex<HashMap<(usize, usize, u64), std::sync::Arc<(Vec<f64>, Vec<f64>)>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));
static MIX_QUANTILES: Lazy<Mutex<HashMap<MixKey, f64>>> = Lazy::new(|| Mutex::new(HashMap::new()));

/// One χ²₁ draw and one χ²_{2K+1} draw per index, from a per-index
/// substream: the χ²₁ draw is the first squared normal and the χ²_{2K+1}
/// draw extends the same stream, so samples for a larger `K` share the
/// smaller-`K` prefix and quantiles are pathwise monotone in both `a`
/// and `K`.
fn mixture_samples(k: usize, draws: usize, seed: u64) -> std::sync::Arc<(Vec<f64>, Vec<f64>)> {
    let key = (k, draws, seed);
    if let Some(hit) = MIX_SAMPLES.lock().unwrap().get(&key) {
        return hit.clone();
    }
    let mut x = Vec::with_capacity(draws);
    let mut y = Vec::with_capacity(draws);
    for i in 0..draws {
        let mut rng = rng_for(seed, &[MIX_TAG, i as u64]);
        let z: f64 = StandardNormal.sample(&mut rng);
        x.push(z * z);
        let mut s = 0.0;
        for _ in 0..2 * k + 1 {
            let z: f64 = StandardNormal.sample(&mut rng);
            s += z * z;
        }
        y.push(s);
    }
    let arc = std::sync::Arc::new((x, y));
    MIX_SAMPLES.lock().unwrap().insert(key, arc.clone());
    arc
}

#[derive(Serialize, Deserialize)]
struct MixCacheEntry {
    a: f64,
    k: usize,
    alpha: f64,
    draws: usize,
    seed: u64,
    quantile: f64,
}

fn mix_cache_path(key: &MixKey) -> PathBuf {
    let dir = std::env::var_os("MTE_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("mte-quantile-cache"));
    let mut hasher = std::collections::hash_map::DefaultHasher::new();
    key.hash(&mut hasher);
    dir.join(format!("mixq_{:016x}.json", hasher.finish()))
}

/// The `1 − α` quantile of `(1+a)χ²₁ + aχ²_{2K+1}` (independent parts),
/// simulated from `draws` seeded samples. Results are memoized in-process
/// and on disk (`MTE_CACHE_DIR`, falling back to the system temp dir),
/// keyed by `(a, K, α, draws, seed)`.
pub fn mixture_quantile(a: f64, k: usize, alpha: f64, draws: usize, seed: u64) -> Result<f64> {
    if !(a.is_finite() && a >= 0.0) {
        return Err(Error::Config(format!("mixture weight must be >= 0, got {a}")));
    }
    if k == 0 {
        return Err(Error::Config("mixture needs K >= 1 instrument contrasts".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("level must be in (0, 1), got {alpha}")));
    }
    if draws == 0 {
        return Err(Error::Config("mixture draws must be positive".into()));
    }
    if draws < 10_000 {
        log::warn!("mixture quantile from only {draws} draws; critical value will be noisy");
    }
    let key: MixKey = (a.to_bits(), k, alpha.to_bits(), draws, seed);
    if let Some(&q) = MIX_QUANTILES.lock().unwrap().get(&key) {
        return Ok(q);
    }
    let path = mix_cache_path(&key);
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(entry) = serde_json::from_str::<MixCacheEntry>(&text) {
            if entry.a.to_bits() == key.0
                && entry.k == k
                && entry.alpha.to_bits() == key.2
                && entry.draws == draws
                && entry.seed == seed
            {
                MIX_QUANTILES.lock().unwrap().insert(key, entry.quantile);
                return Ok(entry.quantile);
            }
        }
    }
    let samples = mixture_samples(k, draws, seed);
    let vals: Vec<f64> = samples
        .0
        .iter()
        .zip(&samples.1)
        .map(|(&x, &y)| (1.0 + a) * x + a * y)
        .collect();
    let q = linalg::empirical_quantile(&vals, 1.0 - alpha);
    MIX_QUANTILES.lock().unwrap().insert(key, q);
    let entry = MixCacheEntry { a, k, alpha, draws, seed, quantile: q };
    if let Some(dir) = path.parent() {
        // Cache writes are best-effort; a read-only cache dir only costs speed.
        let _ = fs::create_dir_all(dir).and_then(|_| {
            fs::write(&path, serde_json::to_string(&entry).expect("serializable"))
        });
    }
    Ok(q)
}

// --- profiled minimization ---------------------------------------------

/// Outcome of profiling the statistic over the null slice.
#[derive(Debug, Clone)]
pub struct ProfiledResult {
    /// Best (smallest) statistic value found on `{c'θ = λ} ∩ box`;
    /// `+∞` when the slice misses the box entirely (auto-reject).
    pub inf_value: f64,
    /// The feasible minimizer, absent only on auto-reject.
    pub minimizer_theta: Option<DVector<f64>>,
    pub converged: bool,
    pub evaluations: usize,
    /// The null value is outside the range of `c'θ` over the box.
    pub auto_reject: bool,
}

fn box_violation(theta: &DVector<f64>, bounds: &[(f64, f64)]) -> f64 {
    theta
        .iter()
        .zip(bounds)
        .map(|(&t, &(lo, hi))| (lo - t).max(0.0).max(t - hi))
        .fold(0.0, f64::max)
}

fn clamp_to_box(theta: &mut DVector<f64>, bounds: &[(f64, f64)]) {
    for (t, &(lo, hi)) in theta.iter_mut().zip(bounds) {
        *t = t.clamp(lo, hi);
    }
}

/// Minimize `MLC_n` over `{θ : c'θ = λ} ∩ theta_box` by multi-start
/// Nelder–Mead in null-space coordinates `θ = θ₀ + N t` (the slice is kept
/// exactly; the box enters as a quadratic penalty, with a final alternating
/// projection onto box and slice). A `λ` outside the range of `c'θ` over
/// the box auto-rejects with an infinite value.
pub fn profile_mlc(
    ctx: &MlcContext,
    lambda: f64,
    weight: &WeightVector,
    optimizer: &OptSpec,
) -> Result<ProfiledResult> {
    let anchor = efficient_estimate(ctx, optimizer).ok().map(|e| e.theta);
    profile_mlc_anchored(ctx, lambda, weight, optimizer, anchor.as_ref())
}

/// `profile_mlc` with a precomputed starting anchor (typically the
/// efficient estimate), so confidence-set inversions solve for it once.
pub fn profile_mlc_anchored(
    ctx: &MlcContext,
    lambda: f64,
    weight: &WeightVector,
    optimizer: &OptSpec,
    anchor: Option<&DVector<f64>>,
) -> Result<ProfiledResult> {
    if !lambda.is_finite() {
        return Err(Error::Config(format!("null value must be finite, got {lambda}")));
    }
    let c = &weight.c;
    let cc = c.norm_squared();
    if cc <= 0.0 {
        return Err(Error::Config("weight vector is identically zero".into()));
    }
    let (range_lo, range_hi) = ctx.spec.lambda_range(c);
    if lambda < range_lo - 1e-12 || lambda > range_hi + 1e-12 {
        return Ok(ProfiledResult {
            inf_value: f64::INFINITY,
            minimizer_theta: None,
            converged: true,
            evaluations: 0,
            auto_reject: true,
        });
    }

    let bounds = &ctx.spec.theta_box;
    let theta0 = c * (lambda / cc);
    let basis = linalg::nullspace_of(c)?;
    let t_dim = basis.ncols();

    // Starting points in t-space: the anchor's slice projection, the
    // minimum-norm slice point, and Latin-hypercube fill.
    let span = bounds
        .iter()
        .map(|&(lo, hi)| (hi - lo).powi(2))
        .sum::<f64>()
        .sqrt()
        .max(1.0);
    let t_bounds = vec![(-span, span); t_dim];
    let t_anchor = match anchor {
        Some(th) => basis.transpose() * (th - &theta0),
        None => DVector::zeros(t_dim),
    };
    let mut starts = optim::default_starts(&t_anchor, &t_bounds, optimizer);
    starts.push(DVector::zeros(t_dim));

    let mut objective = |t: &DVector<f64>| -> f64 {
        let theta = &theta0 + &basis * t;
        let pen = theta
            .iter()
            .zip(bounds)
            .map(|(&v, &(lo, hi))| (lo - v).max(0.0).powi(2) + (v - hi).max(0.0).powi(2))
            .sum::<f64>();
        match mlc_stat(ctx, &theta, weight) {
            Ok(v) => v + BOX_PENALTY * pen,
            Err(_) => f64::INFINITY,
        }
    };
    let best = optim::multi_start(&mut objective, &starts, optimizer);

    // Restore exact feasibility: alternate box clamping with slice
    // restoration, ending on the slice.
    let mut theta = &theta0 + &basis * &best.x;
    for _ in 0..50 {
        clamp_to_box(&mut theta, bounds);
        let gap = lambda - c.dot(&theta);
        theta += c * (gap / cc);
        if box_violation(&theta, bounds) <= SLICE_TOL {
            break;
        }
    }
    let feasible = box_violation(&theta, bounds) <= SLICE_TOL
        && (c.dot(&theta) - lambda).abs() <= SLICE_TOL * (1.0 + lambda.abs());
    let inf_value = mlc_stat(ctx, &theta, weight)?;
    Ok(ProfiledResult {
        inf_value,
        minimizer_theta: Some(theta),
        converged: best.converged && feasible,
        evaluations: best.evaluations,
        auto_reject: false,
    })
}

// --- efficient estimation and the classical Wald test ------------------

/// Minimum-distance estimate with the continuously-updated weighting
/// `Ω̂(θ)⁻¹`.
#[derive(Debug, Clone)]
pub struct EffEstimate {
    pub theta: DVector<f64>,
    /// Objective `n r̂'Ω̂(θ)⁻¹r̂` at the estimate.
    pub value: f64,
    pub converged: bool,
    pub evaluations: usize,
}

/// Minimize the continuously-updated distance `n r̂(θ)'Ω̂(θ)⁻¹r̂(θ)` over
/// the coefficient box. Starts at the least-squares solution, an iterated
/// GLS fixed point, and Latin-hypercube points. Just-identified systems
/// whose exact solution falls inside the box return it directly.
pub fn efficient_estimate(ctx: &MlcContext, optimizer: &OptSpec) -> Result<EffEstimate> {
    cue_minimize(ctx, optimizer, Some(&ctx.spec.theta_box))
}

/// Unrestricted minimum-distance estimate, as used by the classical Wald
/// statistic. With as many moments as coefficients the estimator solves
/// `Âθ = β̂` exactly — and inherits the ill-conditioning of `Â` when the
/// propensities barely separate, which is precisely the regime where Wald
/// inference misbehaves. The coefficient box is ignored here on purpose:
/// clamping the estimator would mask that behavior.
pub fn efficient_estimate_unrestricted(ctx: &MlcContext, optimizer: &OptSpec) -> Result<EffEstimate> {
    cue_minimize(ctx, optimizer, None)
}

fn cue_minimize(
    ctx: &MlcContext,
    optimizer: &OptSpec,
    bounds: Option<&[(f64, f64)]>,
) -> Result<EffEstimate> {
    let beta = ctx.stats.beta_stacked();
    let n = ctx.stats.n as f64;

    if ctx.design.is_square() {
        if let Some(exact) = ctx.design.clone().lu().solve(&beta) {
            let inside = exact.iter().all(|v| v.is_finite())
                && bounds
                    .map(|b| exact.iter().zip(b).all(|(&v, &(lo, hi))| v >= lo && v <= hi))
                    .unwrap_or(true);
            if inside {
                let omega = omega_hat(ctx, &exact);
                let r = ctx.residual(&exact);
                let value = match linalg::sym_inverse(&omega, "moment variance") {
                    Ok(inv) => n * (&inv * &r).dot(&r),
                    Err(_) => 0.0,
                };
                return Ok(EffEstimate { theta: exact, value, converged: true, evaluations: 1 });
            }
        }
    }

    let mut ls = linalg::pinv(&ctx.design, 1e-12) * &beta;
    if let Some(b) = bounds {
        clamp_to_box(&mut ls, b);
    }
    let mut gls = ls.clone();
    for _ in 0..10 {
        let omega = omega_hat(ctx, &gls);
        let Ok(w) = linalg::sym_inverse(&omega, "moment variance") else { break };
        let gram = linalg::symmetrize(&(ctx.design.transpose() * &w * &ctx.design));
        let rhs = ctx.design.transpose() * (&w * &beta);
        let next = match linalg::sym_inverse(&gram, "design Gram matrix") {
            Ok(inv) => inv * rhs,
            Err(_) => linalg::pinv(&gram, 1e-12) * rhs,
        };
        gls = next;
        if let Some(b) = bounds {
            clamp_to_box(&mut gls, b);
        }
    }

    // Latin-hypercube starts need a finite region: the box when there is
    // one, otherwise a local neighborhood of the GLS fixed point.
    let local: Vec<(f64, f64)>;
    let start_region = match bounds {
        Some(b) => b,
        None => {
            local = gls.iter().map(|&v| (v - 10.0, v + 10.0)).collect();
            &local
        }
    };
    let mut starts = optim::default_starts(&gls, start_region, optimizer);
    starts.push(ls);
    let mut objective = |theta: &DVector<f64>| -> f64 {
        let pen = bounds
            .map(|b| {
                theta
                    .iter()
                    .zip(b)
                    .map(|(&v, &(lo, hi))| (lo - v).max(0.0).powi(2) + (v - hi).max(0.0).powi(2))
                    .sum::<f64>()
            })
            .unwrap_or(0.0);
        let omega = omega_hat(ctx, theta);
        match linalg::sym_inverse(&omega, "moment variance") {
            Ok(inv) => {
                let r = ctx.residual(theta);
                n * (&inv * &r).dot(&r) + BOX_PENALTY * pen
            }
            Err(_) => f64::INFINITY,
        }
    };
    let best = optim::multi_start(&mut objective, &starts, optimizer);
    let mut theta = best.x;
    if let Some(b) = bounds {
        clamp_to_box(&mut theta, b);
    }
    let omega = omega_hat(ctx, &theta);
    let inv = linalg::sym_inverse(&omega, "moment variance")?;
    let r = ctx.residual(&theta);
    let value = n * (&inv * &r).dot(&r);
    Ok(EffEstimate { theta, value, converged: best.converged, evaluations: best.evaluations })
}

struct WaldParts {
    estimate: f64,
    se: f64,
    eff: EffEstimate,
    pseudo_inverse: bool,
}

fn wald_parts(ctx: &MlcContext, weight: &WeightVector, optimizer: &OptSpec) -> Result<WaldParts> {
    let eff = efficient_estimate_unrestricted(ctx, optimizer)?;
    let omega = omega_hat(ctx, &eff.theta);
    let om_inv = linalg::sym_inverse(&omega, "moment variance")?;
    let gram = linalg::symmetrize(&(ctx.design.transpose() * &om_inv * &ctx.design));
    let (middle, pseudo_inverse) = match linalg::sym_inverse(&gram, "design Gram matrix") {
        Ok(inv) => (inv, false),
        Err(_) => (linalg::pinv(&gram, 1e-12), true),
    };
    let var = (&middle * &weight.c).dot(&weight.c);
    if !(var.is_finite() && var > 1e-300) {
        return Err(Error::Numerical(
            "the Wald variance for this target degenerated to zero; the target is not \
             identified from these propensities"
                .into(),
        ));
    }
    let n = ctx.stats.n as f64;
    Ok(WaldParts {
        estimate: weight.c.dot(&eff.theta),
        se: (var / n).sqrt(),
        eff,
        pseudo_inverse,
    })
}

/// Classical Wald test of `c'θ = λ` at the efficient estimate, against
/// χ²₁. Optimizer non-convergence is flagged in the metadata but still
/// yields a result.
pub fn classical_wald(
    ctx: &MlcContext,
    lambda: f64,
    weight: &WeightVector,
    optimizer: &OptSpec,
) -> Result<TestResult> {
    let parts = wald_parts(ctx, weight, optimizer)?;
    let stat = ((parts.estimate - lambda) / parts.se).powi(2);
    let crit = linalg::chi2_quantile(1.0, 1.0 - ctx.alpha);
    let meta = serde_json::json!({
        "method": "wald",
        "estimate": parts.estimate,
        "se": parts.se,
        "theta_eff": parts.eff.theta.as_slice(),
        "converged": parts.eff.converged,
        "evaluations": parts.eff.evaluations,
        "variance_pseudo_inverse": parts.pseudo_inverse,
    });
    Ok(TestResult::new(stat, crit, ctx.alpha, meta))
}

/// Robust test of `c'θ = λ`: profiled MLC against the simulated
/// `(1+a)χ²₁ + aχ²_{2K+1}` quantile. `estimated_weights` and `r` override
/// the context flags for this invocation.
pub fn mlc_test(
    ctx: &MlcContext,
    lambda: f64,
    weight: &WeightVector,
    estimated_weights: bool,
    r: f64,
    optimizer: &OptSpec,
) -> Result<TestResult> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!("arm split must lie in [0, 1], got {r}")));
    }
    let mut local = ctx.clone();
    local.estimated_weights = estimated_weights;
    local.r = r;
    let anchor = efficient_estimate(&local, optimizer).ok().map(|e| e.theta);
    let prof = profile_mlc_anchored(&local, lambda, weight, optimizer, anchor.as_ref())?;
    let crit = mixture_quantile(local.a, local.k(), local.alpha, MIXTURE_DRAWS, local.seed)?;
    let meta = serde_json::json!({
        "method": "mlc",
        "a": local.a,
        "kappa": local.kappa,
        "estimated_weights": estimated_weights,
        "r": r,
        "mixture_draws": MIXTURE_DRAWS,
        "auto_reject": prof.auto_reject,
        "converged": prof.converged,
        "evaluations": prof.evaluations,
        "minimizer_theta": prof.minimizer_theta.as_ref().map(|t| t.as_slice().to_vec()),
    });
    Ok(TestResult::new(prof.inf_value, crit, ctx.alpha, meta))
}

/// Invert the robust test into a confidence set for `c'θ`. With no grid
/// supplied, centers on the Wald estimate ± 10 standard errors (falling
/// back to the full range of `c'θ` over the box), widening ×3 once if the
/// accepted set touches a boundary. Respects the context's
/// `estimated_weights` flag.
pub fn mlc_ci(
    ctx: &MlcContext,
    weight: &WeightVector,
    optimizer: &OptSpec,
    grid: Option<GridSpec>,
) -> Result<ConfidenceSet> {
    let crit = mixture_quantile(ctx.a, ctx.k(), ctx.alpha, MIXTURE_DRAWS, ctx.seed)?;
    let anchor = efficient_estimate(ctx, optimizer).ok().map(|e| e.theta);
    let grid = match grid {
        Some(g) => g,
        None => match wald_parts(ctx, weight, optimizer) {
            Ok(p) => GridSpec::new(p.estimate - 10.0 * p.se, p.estimate + 10.0 * p.se, 201)?,
            Err(_) => {
                let (lo, hi) = ctx.spec.lambda_range(&weight.c);
                GridSpec::new(lo, hi, 201)?
            }
        },
    };
    let test = |lambda: f64| -> Result<TestResult> {
        let prof = profile_mlc_anchored(ctx, lambda, weight, optimizer, anchor.as_ref())?;
        Ok(TestResult::new(prof.inf_value, crit, ctx.alpha, serde_json::Value::Null))
    };
    let first = invert_ci(&test, &grid)?;
    if first.open_ended && !first.empty {
        let mid = 0.5 * (grid.lo + grid.hi);
        let half = 1.5 * (grid.hi - grid.lo);
        let wide = GridSpec::new(mid - half, mid + half, 3 * grid.points - 2)?;
        return invert_ci(&test, &wide);
    }
    Ok(first)
}

// --- identification pretest --------------------------------------------

/// Outcome of the identification-category pretest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretestResult {
    /// Set when the robust set is not contained in the Wald interval —
    /// the data cannot certify strong identification.
    pub weak: bool,
    /// The AR weight `a(γ)` solving the size-distortion quantile equation.
    pub a_gamma: f64,
    /// The robust comparison set, as accepted intervals and their hull.
    pub robust_intervals: Vec<[f64; 2]>,
    pub robust_hull: Option<[f64; 2]>,
    /// The classical Wald interval at the context level.
    pub wald_interval: [f64; 2],
}

/// Pretest for weak identification with size-distortion budget `γ`:
/// solve `q_mix(a)(1 − α − γ) = q_χ²₁(1 − α)` for `a(γ)` by bisection,
/// invert the MLC test with weight `a(γ)` against the χ²₁ critical value,
/// and flag "weak" unless that robust set is contained in the classical
/// Wald interval.
pub fn pretest_ics(
    ctx: &MlcContext,
    gamma: f64,
    weight: &WeightVector,
    optimizer: &OptSpec,
) -> Result<PretestResult> {
    if !(gamma.is_finite() && gamma >= 0.0 && ctx.alpha + gamma < 1.0) {
        return Err(Error::Config(format!(
            "distortion budget must satisfy 0 <= gamma < 1 - alpha, got {gamma}"
        )));
    }
    let chi1 = linalg::chi2_quantile(1.0, 1.0 - ctx.alpha);
    let a_gamma = if gamma == 0.0 {
        0.0
    } else {
        let shifted = ctx.alpha + gamma;
        let f = |a: f64| -> Result<f64> {
            Ok(mixture_quantile(a, ctx.k(), shifted, MIXTURE_DRAWS, ctx.seed)? - chi1)
        };
        let (mut lo, mut hi) = (1e-6, 10.0);
        if !(f(lo)? < 0.0 && f(hi)? > 0.0) {
            return Err(Error::Numerical(
                "failed to bracket the pretest AR weight in [1e-6, 10]".into(),
            ));
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if f(mid)? < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-6 * (1.0 + hi) {
                break;
            }
        }
        0.5 * (lo + hi)
    };

    let wald = wald_parts(ctx, weight, optimizer)?;
    let z = chi1.sqrt();
    let wald_interval = [wald.estimate - z * wald.se, wald.estimate + z * wald.se];

    let mut robust_ctx = ctx.clone();
    robust_ctx.a = a_gamma;
    let anchor = Some(wald.eff.theta.clone());
    let test = |lambda: f64| -> Result<TestResult> {
        let prof =
            profile_mlc_anchored(&robust_ctx, lambda, weight, optimizer, anchor.as_ref())?;
        Ok(TestResult::new(prof.inf_value, chi1, ctx.alpha, serde_json::Value::Null))
    };

    // Two inversion passes: fine resolution around the Wald interval (its
    // width is the comparison scale) and a coarse sweep of the whole
    // attainable range, since the robust set can have distant pieces.
    let fine = GridSpec::new(
        wald.estimate - 15.0 * wald.se,
        wald.estimate + 15.0 * wald.se,
        121,
    )?;
    let (range_lo, range_hi) = ctx.spec.lambda_range(&weight.c);
    let coarse = GridSpec::new(range_lo, range_hi, 201)?;
    let mut intervals = invert_ci(&test, &fine)?.intervals;
    intervals.extend(invert_ci(&test, &coarse)?.intervals);
    intervals.sort_by(|a, b| a[0].total_cmp(&b[0]));
    let mut merged: Vec<[f64; 2]> = Vec::new();
    for iv in intervals {
        match merged.last_mut() {
            Some(last) if iv[0] <= last[1] => last[1] = last[1].max(iv[1]),
            _ => merged.push(iv),
        }
    }
    let robust_hull = match (merged.first(), merged.last()) {
        (Some(a), Some(b)) => Some([a[0], b[1]]),
        _ => None,
    };
    let tol = 1e-9 * (1.0 + wald.estimate.abs());
    let weak = match robust_hull {
        // The Wald interval and every robust piece are intervals, so hull
        // containment is exact for the subset check.
        Some([lo, hi]) => lo < wald_interval[0] - tol || hi > wald_interval[1] + tol,
        // An empty robust set is vacuously contained.
        None => false,
    };
    Ok(PretestResult { weak, a_gamma, robust_intervals: merged, robust_hull, wald_interval })
}
