//! Derivative-free minimization used by the profiling routines.
//!
//! The profiled test statistics are cheap to evaluate, low-dimensional
//! (at most a handful of free coordinates) and not everywhere smooth, so a
//! multi-start Nelder–Mead simplex search is used instead of a gradient
//! method. Starts combine a caller-supplied anchor with Latin-hypercube
//! draws; everything is deterministic given the seed in [`OptSpec`].

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::rng_for;

/// Optimizer settings shared by the profiling entry points.
#[derive(Debug, Clone)]
pub struct OptSpec {
    /// Number of starts (anchor + Latin-hypercube fills).
    pub starts: usize,
    /// Iteration cap per start, scaled by dimension.
    pub max_iter_per_dim: usize,
    /// Absolute+relative tolerance on the simplex objective spread.
    pub ftol: f64,
    /// Edge length of the initial simplex.
    pub init_step: f64,
    /// Seed for start generation.
    pub seed: u64,
}

impl Default for OptSpec {
    fn default() -> Self {
        OptSpec { starts: 8, max_iter_per_dim: 400, ftol: 1e-8, init_step: 0.5, seed: 0 }
    }
}

/// Outcome of a multi-start minimization.
#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// One Nelder–Mead run from `x0`. Returns (x, f(x), evals, converged).
pub fn nelder_mead<F: FnMut(&DVector<f64>) -> f64>(
    f: &mut F,
    x0: &DVector<f64>,
    init_step: f64,
    ftol: f64,
    max_iter: usize,
) -> (DVector<f64>, f64, usize, bool) {
    let n = x0.len();
    if n == 0 {
        return (x0.clone(), f(x0), 1, true);
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut evals = 0usize;
    let mut eval = |x: &DVector<f64>, evals: &mut usize| {
        *evals += 1;
        f(x)
    };

    let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = eval(x0, &mut evals);
    simplex.push((x0.clone(), f0));
    for i in 0..n {
        let mut xi = x0.clone();
        xi[i] += init_step;
        let fi = eval(&xi, &mut evals);
        simplex.push((xi, fi));
    }

    let mut converged = false;
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        if (worst - best).abs() <= ftol * (best.abs() + ftol) {
            converged = true;
            break;
        }

        // Centroid of all but the worst vertex.
        let mut centroid = DVector::zeros(n);
        for v in simplex.iter().take(n) {
            centroid += &v.0;
        }
        centroid /= n as f64;

        let reflected = &centroid + alpha * (&centroid - &simplex[n].0);
        let fr = eval(&reflected, &mut evals);

        if fr < simplex[0].1 {
            let expanded = &centroid + gamma * (&reflected - &centroid);
            let fe = eval(&expanded, &mut evals);
            simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
        } else {
            let contracted = if fr < simplex[n].1 {
                &centroid + rho * (&reflected - &centroid)
            } else {
                &centroid + rho * (&simplex[n].0 - &centroid)
            };
            let fc = eval(&contracted, &mut evals);
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (contracted, fc);
            } else {
                // Shrink toward the best vertex.
                let best_x = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    v.0 = &best_x + sigma * (&v.0 - &best_x);
                    v.1 = eval(&v.0, &mut evals);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    (x, fx, evals, converged)
}

/// Latin-hypercube sample of `k` points in the box `bounds`.
pub fn latin_hypercube(bounds: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let dim = bounds.len();
    let mut coords: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for &(lo, hi) in bounds {
        // One draw per stratum, then a random stratum order.
        let mut col: Vec<f64> = (0..k)
            .map(|s| {
                let u: f64 = rng.random();
                lo + (hi - lo) * ((s as f64 + u) / k as f64)
            })
            .collect();
        // Fisher–Yates.
        for i in (1..k).rev() {
            let j = rng.random_range(0..=i);
            col.swap(i, j);
        }
        coords.push(col);
    }
    (0..k)
        .map(|s| DVector::from_iterator(dim, coords.iter().map(|col| col[s])))
        .collect()
}

/// Multi-start minimization: run Nelder–Mead from each start, keep the best.
pub fn multi_start<F: FnMut(&DVector<f64>) -> f64>(
    mut f: F,
    starts: &[DVector<f64>],
    spec: &OptSpec,
) -> MinimizeResult {
    assert!(!starts.is_empty());
    let dim = starts[0].len().max(1);
    let max_iter = spec.max_iter_per_dim * dim;
    let mut best: Option<MinimizeResult> = None;
    let mut total_evals = 0usize;
    let mut any_converged = false;
    for x0 in starts {
        let (x, v, e, conv) = nelder_mead(&mut f, x0, spec.init_step, spec.ftol, max_iter);
        total_evals += e;
        any_converged |= conv;
        if best.as_ref().is_none_or(|b| v < b.value) {
            best = Some(MinimizeResult { x, value: v, evaluations: 0, converged: conv });
        }
    }
    let mut out = best.unwrap();
    out.evaluations = total_evals;
    out.converged = any_converged;
    out
}

/// Default start list: the anchor plus Latin-hypercube points in `bounds`.
pub fn default_starts(
    anchor: &DVector<f64>,
    bounds: &[(f64, f64)],
    spec: &OptSpec,
) -> Vec<DVector<f64>> {
    let mut starts = vec![anchor.clone()];
    if spec.starts > 1 {
        let mut rng = rng_for(spec.seed, &[0x57a2_7500]);
        starts.extend(latin_hypercube(bounds, spec.starts - 1, &mut rng));
    }
    starts
}
