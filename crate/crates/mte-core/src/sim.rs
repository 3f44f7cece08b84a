//! Data-generating processes and Monte Carlo sweep drivers.
//!
//! [`dgp_sample`] draws microdata from a polynomial MTE model with a
//! discrete instrument. [`size_surface`] sweeps the two non-baseline
//! propensity scores over a grid and records null rejection rates for the
//! requested [`Method`]s; [`power_curve`] sweeps the hypothesized target
//! value at a fixed design.
//!
//! Replications run in parallel with one derived RNG stream per
//! (grid point, replication) pair — see [`crate::rng`] — so sweep results
//! are bit-identical regardless of thread count and of whether the sweep
//! was checkpointed and resumed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{basis_h, MteSpec};
use crate::data::{cell_stats, CellStats, Dataset};
use crate::error::{Error, Result};
use crate::linear::{ar_test, cond_wald_test, wald_test, GridSpec, LinearContext, DEFAULT_DRAWS};
use crate::mlc::{classical_wald, mlc_test, MlcContext};
use crate::optim::OptSpec;
use crate::rng::{derive_seed, rng_for};
use crate::weights::{weight_vector, Target};

/// Stream tag for microdata sampling.
const SAMPLE_TAG: u64 = 0xda7a;

/// A parametric data-generating process: polynomial MTR functions, a
/// discrete instrument, and homoskedastic normal outcome errors.
///
/// Potential outcomes are `Y_d = mu_d + sum_m rho_d[m-1] h_m(U) + e_d` with
/// `U ~ Unif(0,1)`, `(e_1, e_0) ~ N(0, err_var I)`, and selection
/// `D = 1[U <= p(Z)]`; `Z` is drawn over `0..p_vec.len()` with cell masses
/// `q_vec`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpSpec {
    /// Polynomial order `M` of the MTR functions.
    pub order: usize,
    /// Mean treated outcome.
    pub mu1: f64,
    /// Mean untreated outcome.
    pub mu0: f64,
    /// Treated-arm slope loadings `(rho_11, ..., rho_1M)`.
    pub rho1: Vec<f64>,
    /// Untreated-arm slope loadings.
    pub rho0: Vec<f64>,
    /// Common variance of the outcome errors (`Sigma_e = err_var * I`).
    pub err_var: f64,
    /// Propensity scores per instrument level, each in `(0,1)`.
    pub p_vec: Vec<f64>,
    /// Instrument cell masses; a probability simplex.
    pub q_vec: Vec<f64>,
    /// Sample size.
    pub n: usize,
    /// Root seed; sweeps derive per-replication streams from it.
    pub seed: u64,
}

impl DgpSpec {
    /// The heterogeneous quadratic benchmark design: `M = 2`,
    /// `mu_1 = mu_0 = 0`, `rho_1 = (-5, -5)`, `rho_0 = (5, 5)`,
    /// `Sigma_e = 0.5 I`, uniform ternary instrument with baseline
    /// propensity `p(z_0) = 0.5` and the two remaining propensities free.
    /// True ATE is 0.
    pub fn quadratic_benchmark(p1: f64, p2: f64, n: usize, seed: u64) -> DgpSpec {
        DgpSpec {
            order: 2,
            mu1: 0.0,
            mu0: 0.0,
            rho1: vec![-5.0, -5.0],
            rho0: vec![5.0, 5.0],
            err_var: 0.5,
            p_vec: vec![0.5, p1, p2],
            q_vec: vec![1.0 / 3.0; 3],
            n,
            seed,
        }
    }

    /// Linear design with strong identification: `M = 1`,
    /// `mu_1 = mu_0 = 0`, `rho_1 = rho_0 = 5`, `Sigma_e = 0.5 I`,
    /// uniform ternary instrument with `p = (0.2, 0.5, 0.8)`.
    pub fn linear_strong(n: usize, seed: u64) -> DgpSpec {
        DgpSpec {
            order: 1,
            mu1: 0.0,
            mu0: 0.0,
            rho1: vec![5.0],
            rho0: vec![5.0],
            err_var: 0.5,
            p_vec: vec![0.2, 0.5, 0.8],
            q_vec: vec![1.0 / 3.0; 3],
            n,
            seed,
        }
    }

    /// Linear design with weak identification: as [`DgpSpec::linear_strong`]
    /// but `p = (0.4, 0.5, 0.6)`.
    pub fn linear_weak(n: usize, seed: u64) -> DgpSpec {
        DgpSpec { p_vec: vec![0.4, 0.5, 0.6], ..DgpSpec::linear_strong(n, seed) }
    }

    /// The model specification implied by `order` (default parameter box).
    pub fn mte_spec(&self) -> Result<MteSpec> {
        MteSpec::polynomial(self.order)
    }

    /// Population average treatment effect (`E[h_m(U)] = 0` for all `m`).
    pub fn true_ate(&self) -> f64 {
        self.mu1 - self.mu0
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::Config("DGP order must be at least 1".into()));
        }
        if self.rho1.len() != self.order || self.rho0.len() != self.order {
            return Err(Error::Config(format!(
                "rho loadings must have length {} (the model order), got {} and {}",
                self.order,
                self.rho1.len(),
                self.rho0.len()
            )));
        }
        if !(self.err_var > 0.0) {
            return Err(Error::Config(format!("error variance must be positive, got {}", self.err_var)));
        }
        if self.p_vec.len() < 2 {
            return Err(Error::Config("need at least two instrument levels".into()));
        }
        if self.q_vec.len() != self.p_vec.len() {
            return Err(Error::Config(format!(
                "p_vec has {} levels but q_vec has {}",
                self.p_vec.len(),
                self.q_vec.len()
            )));
        }
        if self.p_vec.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::Config(format!("propensities must lie in (0,1), got {:?}", self.p_vec)));
        }
        if self.q_vec.iter().any(|&q| !(q > 0.0)) || (self.q_vec.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "instrument masses must be positive and sum to 1, got {:?}",
                self.q_vec
            )));
        }
        if self.n < 50 {
            return Err(Error::Config(format!("sample size must be at least 50, got {}", self.n)));
        }
        Ok(())
    }
}

/// Draw one sample from the DGP. Deterministic in `spec.seed`.
pub fn dgp_sample(spec: &DgpSpec) -> Result<Dataset> {
    spec.validate()?;
    let mte = spec.mte_spec()?;
    let err_sd = spec.err_var.sqrt();
    let mut rng = rng_for(spec.seed, &[SAMPLE_TAG]);

    // Cumulative instrument masses for inverse-CDF draws of Z.
    let mut cum = Vec::with_capacity(spec.q_vec.len());
    let mut acc = 0.0;
    for &q in &spec.q_vec {
        acc += q;
        cum.push(acc);
    }

    let mut y = Vec::with_capacity(spec.n);
    let mut d = Vec::with_capacity(spec.n);
    let mut z = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let uz: f64 = rng.random();
        let zi = cum.iter().position(|&c| uz < c).unwrap_or(spec.q_vec.len() - 1);
        let u: f64 = rng.random();
        let e1: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let e0: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let mut y1 = spec.mu1 + err_sd * e1;
        let mut y0 = spec.mu0 + err_sd * e0;
        for m in 1..=spec.order {
            let h = basis_h(&mte, m, u);
            y1 += spec.rho1[m - 1] * h;
            y0 += spec.rho0[m - 1] * h;
        }
        let di = u <= spec.p_vec[zi];
        y.push(if di { y1 } else { y0 });
        d.push(di as u8);
        z.push(zi);
    }
    let levels = (0..spec.q_vec.len()).map(|l| format!("z{l}")).collect();
    Ok(Dataset::from_parts(y, d, z, levels))
}

/// Inference procedure evaluated inside a sweep. All methods test
/// `H_0: ATE = lambda` at the sweep's level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Modified linear-combination test (any order).
    Mlc,
    /// Classical Wald: the efficient pairwise combination in linear models,
    /// the minimum-distance Wald at the continuously-updated estimate for
    /// higher orders. Not robust to weak identification.
    Wald,
    /// Conditional Wald with simulated critical values (order 1 only).
    CondWald,
    /// Anderson–Rubin test from the single instrument pair `(z_0, z_k)`
    /// (order 1 only).
    Ar {
        k: usize,
    },
}

impl Method {
    /// Label used in CSV output and config files: `mlc`, `wald`, `cwald`,
    /// `ar` (pair 1) or `ar<k>`.
    pub fn label(&self) -> String {
        match self {
            Method::Mlc => "mlc".into(),
            Method::Wald => "wald".into(),
            Method::CondWald => "cwald".into(),
            Method::Ar { k: 1 } => "ar".into(),
            Method::Ar { k } => format!("ar{k}"),
        }
    }

    fn linear_only(&self) -> bool {
        matches!(self, Method::CondWald | Method::Ar { .. })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "mlc" => return Ok(Method::Mlc),
            "wald" => return Ok(Method::Wald),
            "cwald" | "condwald" | "cond_wald" => return Ok(Method::CondWald),
            "ar" => return Ok(Method::Ar { k: 1 }),
            _ => {}
        }
        if let Some(num) = t.strip_prefix("ar") {
            if let Ok(k) = num.parse::<usize>() {
                if k >= 1 {
                    return Ok(Method::Ar { k });
                }
            }
        }
        Err(Error::Config(format!("unknown method {s:?}; expected mlc, wald, cwald, or ar[<k>]")))
    }
}

/// One (grid point, method) cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Grid coordinates: `[p1, p2]` on a size surface, `[lambda]` on a
    /// power curve.
    pub coords: Vec<f64>,
    /// Method label, as in [`Method::label`].
    pub method: String,
    /// Rejection frequency among replications that produced a verdict.
    pub reject_rate: f64,
    /// Replications that produced a verdict.
    pub reps: usize,
    /// Binomial Monte Carlo standard error `sqrt(r(1-r)/reps)`.
    pub mc_se: f64,
    /// Replications whose evaluation failed (empty cells, degenerate
    /// variances, optimizer breakdown); excluded from the rate.
    pub failures: usize,
}

/// Sweep flavor; fixes the meaning and CSV names of the coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Size,
    Power,
}

impl SweepKind {
    fn coord_names(&self) -> &'static [&'static str] {
        match self {
            SweepKind::Size => &["p1", "p2"],
            SweepKind::Power => &["lambda"],
        }
    }
}

/// Results of a Monte Carlo sweep, one row per (grid point, method).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub rows: Vec<SweepRow>,
    /// Root seed the per-replication streams were derived from.
    pub seed: u64,
    /// Requested replications per grid point (row counts may be lower
    /// where evaluations failed).
    pub reps: usize,
}

impl SweepResult {
    /// Render as CSV with columns `p1,p2` (size) or `lambda` (power)
    /// followed by `method,reject_rate,reps,mc_se`.
    pub fn to_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = self.kind.coord_names().iter().map(|s| s.to_string()).collect();
        header.extend(["method", "reject_rate", "reps", "mc_se"].map(String::from));
        wtr.write_record(&header).map_err(|e| Error::Data(format!("csv: {e}")))?;
        for row in &self.rows {
            let mut rec: Vec<String> = row.coords.iter().map(|c| c.to_string()).collect();
            rec.push(row.method.clone());
            rec.push(row.reject_rate.to_string());
            rec.push(row.reps.to_string());
            rec.push(row.mc_se.to_string());
            wtr.write_record(&rec).map_err(|e| Error::Data(format!("csv: {e}")))?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
    }
}

/// Execution options shared by the sweep drivers.
#[derive(Debug, Clone)]
pub struct RunOpts {
    /// Test level.
    pub alpha: f64,
    /// Checkpoint file (JSON). Written after every completed grid point;
    /// consulted on startup to resume an interrupted sweep. A resumed sweep
    /// reproduces the uninterrupted one bit for bit.
    pub checkpoint: Option<PathBuf>,
    /// Evaluate at most this many grid points (checkpointed points count),
    /// then return the partial result.
    pub max_points: Option<usize>,
    /// Optimizer settings for the MLC and minimum-distance Wald profiles.
    pub opt: OptSpec,
    /// Simulated draws for conditional critical values.
    pub draws: usize,
}

impl Default for RunOpts {
    fn default() -> Self {
        RunOpts {
            alpha: 0.05,
            checkpoint: None,
            max_points: None,
            opt: OptSpec::default(),
            draws: DEFAULT_DRAWS,
        }
    }
}

/// Default axis of the size surface: 21 propensity values on `[0.05, 0.95]`.
pub fn default_size_grid() -> GridSpec {
    GridSpec::new(0.05, 0.95, 21).expect("static grid is valid")
}

/// Default alternative axis for power curves: 21 values on `[-5, 5]`.
pub fn default_power_grid() -> GridSpec {
    GridSpec::new(-5.0, 5.0, 21).expect("static grid is valid")
}

/// Null rejection surface over the two non-baseline propensity scores.
///
/// `base` must be a ternary design; grid point `(i, j)` replaces
/// `(p_vec[1], p_vec[2])` with `(p1_grid[i], p2_grid[j])` while `p_vec[0]`
/// stays fixed, and every method tests the true hypothesis
/// `H_0: ATE = base.true_ate()`.
pub fn size_surface(
    base: &DgpSpec,
    p1_grid: &GridSpec,
    p2_grid: &GridSpec,
    reps: usize,
    methods: &[Method],
    opts: &RunOpts,
) -> Result<SweepResult> {
    base.validate()?;
    check_sweep_args(base, reps, methods, opts)?;
    if base.p_vec.len() != 3 {
        return Err(Error::Config(format!(
            "the size surface varies the two non-baseline propensities of a ternary design; \
             got {} instrument levels",
            base.p_vec.len()
        )));
    }
    for g in [p1_grid, p2_grid] {
        if !(g.lo > 0.0 && g.hi < 1.0) {
            return Err(Error::Config(format!(
                "propensity grid [{}, {}] must stay inside (0,1)",
                g.lo, g.hi
            )));
        }
    }
    let lambda = base.true_ate();
    let fingerprint = format!(
        "size|{}|p1={:?}|p2={:?}|{}",
        spec_fingerprint(base),
        (p1_grid.lo, p1_grid.hi, p1_grid.points),
        (p2_grid.lo, p2_grid.hi, p2_grid.points),
        run_fingerprint(reps, methods, opts),
    );
    let total = p1_grid.points * p2_grid.points;
    run_sweep(
        SweepKind::Size,
        fingerprint,
        total,
        |idx| {
            let p1 = p1_grid.value(idx / p2_grid.points);
            let p2 = p2_grid.value(idx % p2_grid.points);
            let mut spec = base.clone();
            spec.p_vec[1] = p1;
            spec.p_vec[2] = p2;
            (vec![p1, p2], spec, lambda)
        },
        reps,
        methods,
        opts,
        base.seed,
    )
}

/// Rejection frequency of `H_0: ATE = lambda` over a grid of `lambda`
/// values at a fixed design.
pub fn power_curve(
    design: &DgpSpec,
    lambda_grid: &GridSpec,
    reps: usize,
    methods: &[Method],
    opts: &RunOpts,
) -> Result<SweepResult> {
    design.validate()?;
    check_sweep_args(design, reps, methods, opts)?;
    let fingerprint = format!(
        "power|{}|lambda={:?}|{}",
        spec_fingerprint(design),
        (lambda_grid.lo, lambda_grid.hi, lambda_grid.points),
        run_fingerprint(reps, methods, opts),
    );
    run_sweep(
        SweepKind::Power,
        fingerprint,
        lambda_grid.points,
        |idx| {
            let lambda = lambda_grid.value(idx);
            (vec![lambda], design.clone(), lambda)
        },
        reps,
        methods,
        opts,
        design.seed,
    )
}

fn check_sweep_args(base: &DgpSpec, reps: usize, methods: &[Method], opts: &RunOpts) -> Result<()> {
    if reps == 0 {
        return Err(Error::Config("need at least one replication".into()));
    }
    if methods.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::Config(format!("test level alpha = {} outside (0, 1)", opts.alpha)));
    }
    for m in methods {
        if m.linear_only() && base.order != 1 {
            return Err(Error::Config(format!(
                "method {:?} applies to linear (order 1) models only; the design has order {}",
                m.label(),
                base.order
            )));
        }
        if let Method::Ar { k } = m {
            if *k == 0 || *k >= base.p_vec.len() {
                return Err(Error::Config(format!(
                    "AR pair index {k} outside 1..={}",
                    base.p_vec.len() - 1
                )));
            }
        }
    }
    let mut seen = Vec::new();
    for m in methods {
        if seen.contains(m) {
            return Err(Error::Config(format!("method {:?} requested twice", m.label())));
        }
        seen.push(*m);
    }
    Ok(())
}

fn spec_fingerprint(s: &DgpSpec) -> String {
    format!(
        "order={};mu=({},{});rho1={:?};rho0={:?};err={};p={:?};q={:?};n={};seed={}",
        s.order, s.mu1, s.mu0, s.rho1, s.rho0, s.err_var, s.p_vec, s.q_vec, s.n, s.seed
    )
}

fn run_fingerprint(reps: usize, methods: &[Method], opts: &RunOpts) -> String {
    let labels: Vec<String> = methods.iter().map(Method::label).collect();
    format!(
        "reps={};methods={};alpha={};draws={};opt=({},{},{},{},{})",
        reps,
        labels.join("+"),
        opts.alpha,
        opts.draws,
        opts.opt.starts,
        opts.opt.max_iter_per_dim,
        opts.opt.ftol,
        opts.opt.init_step,
        opts.opt.seed
    )
}

#[allow(clippy::too_many_arguments)]
fn run_sweep<F>(
    kind: SweepKind,
    fingerprint: String,
    total_points: usize,
    point_config: F,
    reps: usize,
    methods: &[Method],
    opts: &RunOpts,
    root: u64,
) -> Result<SweepResult>
where
    F: Fn(usize) -> (Vec<f64>, DgpSpec, f64),
{
    let mut done = load_checkpoint(opts.checkpoint.as_deref(), &fingerprint)?;
    let cap = opts.max_points.unwrap_or(total_points).min(total_points);
    for idx in 0..total_points {
        if done.len() >= cap {
            break;
        }
        if done.contains_key(&idx) {
            continue;
        }
        let (coords, spec, lambda) = point_config(idx);
        let rows = run_point(&spec, &coords, lambda, methods, reps, root, idx as u64, opts);
        done.insert(idx, rows);
        save_checkpoint(opts.checkpoint.as_deref(), &fingerprint, &done)?;
    }
    let rows = done.into_values().flatten().collect();
    Ok(SweepResult { kind, rows, seed: root, reps })
}

#[allow(clippy::too_many_arguments)]
fn run_point(
    spec: &DgpSpec,
    coords: &[f64],
    lambda: f64,
    methods: &[Method],
    reps: usize,
    root: u64,
    point: u64,
    opts: &RunOpts,
) -> Vec<SweepRow> {
    // Indexed collect keeps the reduction order fixed regardless of how
    // rayon schedules the replications.
    let outcomes: Vec<Vec<Option<bool>>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rep_spec = spec.clone();
            rep_spec.seed = derive_seed(root, &[point, rep as u64]);
            evaluate_once(&rep_spec, lambda, methods, opts)
        })
        .collect();

    let mut rejections = vec![0usize; methods.len()];
    let mut evaluated = vec![0usize; methods.len()];
    for per_rep in &outcomes {
        for (mi, outcome) in per_rep.iter().enumerate() {
            if let Some(reject) = outcome {
                evaluated[mi] += 1;
                rejections[mi] += *reject as usize;
            }
        }
    }
    methods
        .iter()
        .enumerate()
        .map(|(mi, m)| {
            let rate = if evaluated[mi] > 0 {
                rejections[mi] as f64 / evaluated[mi] as f64
            } else {
                f64::NAN
            };
            let mc_se = if evaluated[mi] > 0 {
                (rate * (1.0 - rate) / evaluated[mi] as f64).sqrt()
            } else {
                f64::NAN
            };
            SweepRow {
                coords: coords.to_vec(),
                method: m.label(),
                reject_rate: rate,
                reps: evaluated[mi],
                mc_se,
                failures: reps - evaluated[mi],
            }
        })
        .collect()
}

/// One replication: sample, summarize, run every method. A sampling or
/// summary failure fails all methods for this replication; a method-level
/// failure (degenerate variance, optimizer breakdown) fails only it.
fn evaluate_once(spec: &DgpSpec, lambda: f64, methods: &[Method], opts: &RunOpts) -> Vec<Option<bool>> {
    let prepared = dgp_sample(spec).and_then(|ds| {
        let stats = cell_stats(&ds)?;
        let mte = spec.mte_spec()?;
        Ok((stats, mte))
    });
    let (stats, mte) = match prepared {
        Ok(v) => v,
        Err(_) => return vec![None; methods.len()],
    };
    methods
        .iter()
        .map(|m| run_method(*m, &stats, &mte, lambda, spec.seed, opts).ok())
        .collect()
}

fn run_method(
    method: Method,
    stats: &CellStats,
    mte: &MteSpec,
    lambda: f64,
    seed: u64,
    opts: &RunOpts,
) -> Result<bool> {
    match method {
        Method::Mlc => {
            let w = weight_vector(&Target::Ate, mte, stats)?;
            let ctx = MlcContext::new(mte.clone(), stats.clone(), opts.alpha, seed)?;
            Ok(mlc_test(&ctx, lambda, &w, false, 0.5, &opts.opt)?.reject)
        }
        Method::Wald => {
            if mte.order == 1 {
                let ctx = LinearContext::with_target(stats.clone(), &Target::Ate, mte)?;
                Ok(wald_test(&ctx, lambda, opts.alpha)?.reject)
            } else {
                let w = weight_vector(&Target::Ate, mte, stats)?;
                let ctx = MlcContext::new(mte.clone(), stats.clone(), opts.alpha, seed)?;
                Ok(classical_wald(&ctx, lambda, &w, &opts.opt)?.reject)
            }
        }
        Method::CondWald => {
            let ctx = LinearContext::with_target(stats.clone(), &Target::Ate, mte)?.with_seed(seed);
            Ok(cond_wald_test(&ctx, lambda, opts.alpha, opts.draws)?.reject)
        }
        Method::Ar { k } => {
            let ctx = LinearContext::with_target(stats.clone(), &Target::Ate, mte)?;
            Ok(ar_test(&ctx, k, lambda, opts.alpha)?.reject)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    fingerprint: String,
    points: BTreeMap<usize, Vec<SweepRow>>,
}

fn load_checkpoint(path: Option<&Path>, fingerprint: &str) -> Result<BTreeMap<usize, Vec<SweepRow>>> {
    let Some(path) = path else { return Ok(BTreeMap::new()) };
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let cp: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("malformed checkpoint {}: {e}", path.display())))?;
    if cp.fingerprint != fingerprint {
        return Err(Error::Config(format!(
            "checkpoint {} belongs to a different sweep configuration",
            path.display()
        )));
    }
    Ok(cp.points)
}

fn save_checkpoint(
    path: Option<&Path>,
    fingerprint: &str,
    points: &BTreeMap<usize, Vec<SweepRow>>,
) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let cp = Checkpoint { fingerprint: fingerprint.to_string(), points: points.clone() };
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_string(&cp).expect("checkpoint serializes"))
        .map_err(|e| Error::Data(format!("cannot write checkpoint {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| Error::Data(format!("cannot move checkpoint into place: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_benchmark_matches_the_conditional_mean_oracle() {
        // E[Y | D=1, p=0.5] = mu1 + sum_m rho_1m * lambda_1m(0.5) with
        // lambda_1m(p) = (p^m - 1)/(m+1): -5*(-0.25) - 5*(-0.25) = 2.5.
        let spec = DgpSpec::quadratic_benchmark(0.2, 0.8, 200_000, 11);
        let ds = dgp_sample(&spec).unwrap();
        let stats = cell_stats(&ds).unwrap();
        assert!((stats.beta1_hat[0] - 2.5).abs() < 0.05, "beta1[z0] = {}", stats.beta1_hat[0]);
    }

    #[test]
    fn zero_slopes_remove_endogeneity() {
        let mut spec = DgpSpec::quadratic_benchmark(0.2, 0.8, 200_000, 5);
        spec.rho1 = vec![0.0, 0.0];
        spec.rho0 = vec![0.0, 0.0];
        let stats = cell_stats(&dgp_sample(&spec).unwrap()).unwrap();
        for l in 0..3 {
            assert!(
                (stats.beta1_hat[l] - stats.beta0_hat[l]).abs() < 0.05,
                "level {l}: treated {} vs untreated {}",
                stats.beta1_hat[l],
                stats.beta0_hat[l]
            );
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = DgpSpec::linear_strong(500, 42);
        let a = dgp_sample(&spec).unwrap();
        let b = dgp_sample(&spec).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert!(ra.y == rb.y && ra.d == rb.d && ra.z == rb.z);
        }
        let c = dgp_sample(&DgpSpec { seed: 43, ..spec }).unwrap();
        assert!(a.records.iter().zip(&c.records).any(|(ra, rc)| ra.y != rc.y));
    }

    #[test]
    fn dgp_rejects_bad_configs() {
        let ok = DgpSpec::linear_strong(500, 0);
        assert!(DgpSpec { p_vec: vec![0.2, 0.5, 1.0], ..ok.clone() }.validate().is_err());
        assert!(DgpSpec { q_vec: vec![0.5, 0.2, 0.2], ..ok.clone() }.validate().is_err());
        assert!(DgpSpec { n: 20, ..ok.clone() }.validate().is_err());
        assert!(DgpSpec { rho1: vec![5.0, 1.0], ..ok.clone() }.validate().is_err());
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn method_labels_round_trip() {
        for m in [Method::Mlc, Method::Wald, Method::CondWald, Method::Ar { k: 1 }, Method::Ar { k: 3 }] {
            assert_eq!(m.label().parse::<Method>().unwrap(), m);
        }
        assert_eq!("cond_wald".parse::<Method>().unwrap(), Method::CondWald);
        assert!("tsls".parse::<Method>().is_err());
        assert!("ar0".parse::<Method>().is_err());
    }

    #[test]
    fn linear_only_methods_require_order_one() {
        let base = DgpSpec::quadratic_benchmark(0.2, 0.8, 500, 1);
        let grid = GridSpec::new(0.2, 0.8, 2).unwrap();
        let err = size_surface(&base, &grid, &grid, 10, &[Method::CondWald], &RunOpts::default());
        assert!(matches!(err, Err(Error::Config(_))));
        let err = power_curve(
            &base,
            &default_power_grid(),
            10,
            &[Method::Ar { k: 1 }],
            &RunOpts::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
        // Out-of-range pair index on a valid linear design.
        let lin = DgpSpec::linear_strong(500, 1);
        let err = power_curve(&lin, &default_power_grid(), 10, &[Method::Ar { k: 3 }], &RunOpts::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn size_surface_runs_a_tiny_grid_deterministically() {
        let base = DgpSpec::linear_strong(400, 117);
        let grid = GridSpec::new(0.25, 0.75, 2).unwrap();
        let methods = [Method::Ar { k: 1 }, Method::Wald];
        let opts = RunOpts::default();
        let a = size_surface(&base, &grid, &grid, 25, &methods, &opts).unwrap();
        let b = size_surface(&base, &grid, &grid, 25, &methods, &opts).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.rows.len(), 4 * methods.len());
        for row in &a.rows {
            assert!(row.reject_rate >= 0.0 && row.reject_rate <= 1.0);
            assert!(row.reps + row.failures == 25);
            assert_eq!(row.coords.len(), 2);
        }
        let csv = a.to_csv().unwrap();
        assert!(csv.starts_with("p1,p2,method,reject_rate,reps,mc_se\n"));
        assert_eq!(csv.lines().count(), 1 + a.rows.len());
    }

    #[test]
    fn checkpoint_resume_equals_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let cp = dir.path().join("sweep.json");
        let base = DgpSpec::linear_strong(300, 9);
        let grid = GridSpec::new(0.3, 0.7, 2).unwrap();
        let methods = [Method::Ar { k: 1 }];

        let full = size_surface(&base, &grid, &grid, 15, &methods, &RunOpts::default()).unwrap();

        let partial_opts = RunOpts {
            checkpoint: Some(cp.clone()),
            max_points: Some(2),
            ..RunOpts::default()
        };
        let partial = size_surface(&base, &grid, &grid, 15, &methods, &partial_opts).unwrap();
        assert_eq!(partial.rows.len(), 2);
        assert!(cp.exists());

        let resume_opts = RunOpts { checkpoint: Some(cp.clone()), ..RunOpts::default() };
        let resumed = size_surface(&base, &grid, &grid, 15, &methods, &resume_opts).unwrap();
        assert_eq!(resumed.rows, full.rows);

        // A different configuration must refuse the stale checkpoint.
        let err = size_surface(&base, &grid, &grid, 16, &methods, &resume_opts);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn power_curve_covers_truth_and_rejects_distant_alternatives() {
        let design = DgpSpec::linear_strong(500, 23);
        let grid = GridSpec::new(-4.0, 4.0, 3).unwrap(); // {-4, 0, 4}
        let res = power_curve(&design, &grid, 60, &[Method::CondWald], &RunOpts::default()).unwrap();
        assert_eq!(res.kind, SweepKind::Power);
        let rate_at = |l: f64| {
            res.rows
                .iter()
                .find(|r| (r.coords[0] - l).abs() < 1e-12)
                .map(|r| r.reject_rate)
                .unwrap()
        };
        assert!(rate_at(0.0) <= 0.15, "size at truth: {}", rate_at(0.0));
        assert!(rate_at(-4.0) >= 0.6, "power at -4: {}", rate_at(-4.0));
        assert!(rate_at(4.0) >= 0.6, "power at 4: {}", rate_at(4.0));
        let csv = res.to_csv().unwrap();
        assert!(csv.starts_with("lambda,method,reject_rate,reps,mc_se\n"));
    }
}
