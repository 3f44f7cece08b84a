//! Aggregating covariate-cell confidence sets.
//!
//! With covariates, inference runs separately within each covariate cell
//! `w` and the unconditional target is the mass-weighted average
//! `Σ_w q(w) λ(w)`. Per-cell sets built at the Šidák level
//! `(1−α)^{1/J}` combine into a level `1−α` set for the average: a
//! weighted Minkowski sum when the mass is known, or an exact min/max
//! over a mass box intersected with the simplex when the mass itself is
//! estimated (splitting the level α = α₁ + α₂ between mass and cells).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A per-cell confidence interval for the cell-conditional target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellCi {
    /// Covariate-cell label.
    pub w: String,
    pub interval: [f64; 2],
    /// The level this cell interval was built at.
    pub level: f64,
}

impl CellCi {
    pub fn new(w: impl Into<String>, interval: [f64; 2], level: f64) -> Result<Self> {
        if !(interval[0] <= interval[1]) {
            return Err(Error::Config(format!(
                "cell interval must be ordered, got [{}, {}]",
                interval[0], interval[1]
            )));
        }
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::Config(format!("cell level must be in (0, 1), got {level}")));
        }
        Ok(CellCi { w: w.into(), interval, level })
    }
}

/// The per-cell level needed so that `J` simultaneous cells reach joint
/// level `1−α`: `(1−α)^{1/J}`.
pub fn sidak_level(alpha: f64, cells: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("level must be in (0, 1), got {alpha}")));
    }
    if cells == 0 {
        return Err(Error::Config("need at least one covariate cell".into()));
    }
    Ok((1.0 - alpha).powf(1.0 / cells as f64))
}

fn check_common_level(cells: &[CellCi]) -> Result<f64> {
    let first = cells
        .first()
        .ok_or_else(|| Error::Config("need at least one covariate cell".into()))?
        .level;
    for cell in cells {
        if (cell.level - first).abs() > 1e-10 {
            return Err(Error::Config(format!(
                "cell levels disagree: cell {} at {} vs {}",
                cell.w, cell.level, first
            )));
        }
    }
    Ok(first)
}

/// Aggregate with known covariate mass: the weighted Minkowski sum
/// `[Σ q(w)·lo_w, Σ q(w)·hi_w]`.
pub fn aggregate_known_mass(cells: &[CellCi], mass: &[f64]) -> Result<[f64; 2]> {
    check_common_level(cells)?;
    if cells.len() != mass.len() {
        return Err(Error::Config(format!(
            "{} cells but {} mass entries",
            cells.len(),
            mass.len()
        )));
    }
    if mass.iter().any(|&q| !(0.0..=1.0).contains(&q)) {
        return Err(Error::Config("covariate mass entries must lie in [0, 1]".into()));
    }
    let total: f64 = mass.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::Config(format!("covariate mass must sum to 1, got {total}")));
    }
    let lo = cells.iter().zip(mass).map(|(c, &q)| q * c.interval[0]).sum();
    let hi = cells.iter().zip(mass).map(|(c, &q)| q * c.interval[1]).sum();
    Ok([lo, hi])
}

/// Enumerate the vertices of `{q : q ∈ box, Σq = 1}`: at a vertex of this
/// polytope at most one coordinate is strictly inside its box interval,
/// so fix all but one coordinate at an endpoint and solve for the rest.
fn simplex_box_vertices(mass_box: &[[f64; 2]]) -> Vec<Vec<f64>> {
    let j = mass_box.len();
    let mut vertices: Vec<Vec<f64>> = Vec::new();
    // `free` is the coordinate absorbing the simplex constraint.
    for free in 0..j {
        let others: Vec<usize> = (0..j).filter(|&i| i != free).collect();
        // Every endpoint pattern for the fixed coordinates.
        for pattern in 0..(1usize << others.len()) {
            let mut q = vec![0.0; j];
            let mut sum = 0.0;
            for (bit, &i) in others.iter().enumerate() {
                let v = if pattern >> bit & 1 == 0 { mass_box[i][0] } else { mass_box[i][1] };
                q[i] = v;
                sum += v;
            }
            let rest = 1.0 - sum;
            if rest >= mass_box[free][0] - 1e-12 && rest <= mass_box[free][1] + 1e-12 {
                q[free] = rest.clamp(mass_box[free][0], mass_box[free][1]);
                vertices.push(q);
            }
        }
    }
    vertices
}

/// Aggregate with an estimated covariate mass: the exact range of
/// `Σ q(w) λ(w)` over `q` in the mass box (intersected with the simplex)
/// and `λ(w)` in the cell intervals. For fixed `q ≥ 0` the extremes in
/// `λ` sit at the interval endpoints, and the resulting linear program in
/// `q` attains its extremes at polytope vertices, so corner enumeration
/// is exact.
pub fn aggregate_estimated_mass(cells: &[CellCi], mass_box: &[[f64; 2]]) -> Result<[f64; 2]> {
    check_common_level(cells)?;
    if cells.len() != mass_box.len() {
        return Err(Error::Config(format!(
            "{} cells but {} mass intervals",
            cells.len(),
            mass_box.len()
        )));
    }
    let mut clipped = Vec::with_capacity(mass_box.len());
    for (i, b) in mass_box.iter().enumerate() {
        if !(b[0] <= b[1]) {
            return Err(Error::Config(format!(
                "mass interval for cell {} must be ordered, got [{}, {}]",
                cells[i].w, b[0], b[1]
            )));
        }
        clipped.push([b[0].max(0.0), b[1].min(1.0)]);
    }
    let lo_sum: f64 = clipped.iter().map(|b| b[0]).sum();
    let hi_sum: f64 = clipped.iter().map(|b| b[1]).sum();
    if lo_sum > 1.0 + 1e-10 || hi_sum < 1.0 - 1e-10 {
        return Err(Error::Data(
            "mass intervals do not intersect the probability simplex".into(),
        ));
    }

    let vertices = simplex_box_vertices(&clipped);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for q in &vertices {
        let v_lo: f64 = cells.iter().zip(q).map(|(c, &qi)| qi * c.interval[0]).sum();
        let v_hi: f64 = cells.iter().zip(q).map(|(c, &qi)| qi * c.interval[1]).sum();
        lo = lo.min(v_lo);
        hi = hi.max(v_hi);
    }
    Ok([lo, hi])
}
