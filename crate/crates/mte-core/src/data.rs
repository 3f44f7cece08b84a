//! Microdata containers, cell-level summary statistics and their sampling
//! covariances.
//!
//! Inference never touches the raw rows after this module: everything
//! downstream consumes the per-instrument-cell quantities
//! `(q_hat, p_hat, beta1_hat, beta0_hat, sigma2)` and the covariance
//! estimates built from them, so `CellStats` is the hand-off type between
//! data handling and the test statistics.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation: outcome, binary treatment, instrument-level index and
/// optional covariate-level index (both indices into the level tables of
/// the owning [`Dataset`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub y: f64,
    pub d: u8,
    pub z: usize,
    pub w: Option<usize>,
}

/// A loaded sample with its instrument (and optional covariate) level
/// tables. Instrument levels are ordered; index 0 is the baseline level
/// used by pairwise contrasts.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub instrument_levels: Vec<String>,
    pub covariate_levels: Vec<String>,
}

impl Dataset {
    /// Assemble a dataset from parallel arrays (used by simulators and
    /// tests). Instrument indices must be in range for `levels`.
    pub fn from_parts(y: Vec<f64>, d: Vec<u8>, z: Vec<usize>, levels: Vec<String>) -> Self {
        assert!(y.len() == d.len() && d.len() == z.len());
        debug_assert!(z.iter().all(|&zi| zi < levels.len()));
        let records = y
            .into_iter()
            .zip(d)
            .zip(z)
            .map(|((y, d), z)| Record { y, d, z, w: None })
            .collect();
        Dataset { records, instrument_levels: levels, covariate_levels: Vec::new() }
    }

    /// Rows with covariate level `w` as a standalone dataset.
    pub fn subset_by_covariate(&self, w: usize) -> Dataset {
        Dataset {
            records: self.records.iter().filter(|r| r.w == Some(w)).copied().collect(),
            instrument_levels: self.instrument_levels.clone(),
            covariate_levels: self.covariate_levels.clone(),
        }
    }

    /// Number of instrument levels `K + 1`.
    pub fn n_levels(&self) -> usize {
        self.instrument_levels.len()
    }
}

/// Column mapping for CSV input.
///
/// When `instrument_levels` is `None` the distinct labels found in the file
/// are ordered lexicographically (a deterministic default); supply the list
/// explicitly to pin a different baseline level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub y: String,
    pub d: String,
    pub z: String,
    pub w: Option<String>,
    pub instrument_levels: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            y: "y".into(),
            d: "d".into(),
            z: "z".into(),
            w: None,
            instrument_levels: None,
        }
    }
}

/// Load a CSV file with a header row into a [`Dataset`].
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column {name:?} in {}", path.display())))
    };
    let y_col = col(&schema.y)?;
    let d_col = col(&schema.d)?;
    let z_col = col(&schema.z)?;
    let w_col = schema.w.as_deref().map(col).transpose()?;

    // First pass: collect raw fields.
    let mut raw: Vec<(f64, u8, String, Option<String>)> = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("row {}: {e}", i + 1)))?;
        let y: f64 = row[y_col]
            .parse()
            .map_err(|_| Error::Data(format!("row {}: cannot parse outcome {:?}", i + 1, &row[y_col])))?;
        let d = match row[d_col].parse::<f64>() {
            Ok(v) if v == 0.0 => 0u8,
            Ok(v) if v == 1.0 => 1u8,
            _ => {
                return Err(Error::InvalidTreatment { found: row[d_col].to_string(), row: i + 1 })
            }
        };
        let z = row[z_col].to_string();
        let w = w_col.map(|c| row[c].to_string());
        raw.push((y, d, z, w));
    }
    if raw.is_empty() {
        return Err(Error::Data(format!("{} contains no data rows", path.display())));
    }

    // Level tables: configured order, or lexicographic over observed labels.
    let instrument_levels: Vec<String> = match &schema.instrument_levels {
        Some(levels) => levels.clone(),
        None => {
            let set: BTreeSet<&str> = raw.iter().map(|r| r.2.as_str()).collect();
            set.into_iter().map(String::from).collect()
        }
    };
    let covariate_levels: Vec<String> = {
        let set: BTreeSet<&str> = raw.iter().filter_map(|r| r.3.as_deref()).collect();
        set.into_iter().map(String::from).collect()
    };

    let z_index = |label: &str| -> Result<usize> {
        instrument_levels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Data(format!("instrument label {label:?} not in configured levels")))
    };
    let records = raw
        .into_iter()
        .map(|(y, d, z, w)| {
            let z = z_index(&z)?;
            let w = w.map(|lbl| {
                covariate_levels.iter().position(|l| *l == lbl).expect("collected above")
            });
            Ok(Record { y, d, z, w })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset { records, instrument_levels, covariate_levels })
}

/// Per-instrument-cell summary statistics.
///
/// Arm-indexed arrays follow the stacking convention of the moment system:
/// index 0 holds the treated arm (`d = 1`), index 1 the untreated arm
/// (`d = 0`), matching the `(beta_1', beta_0')'` ordering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellStats {
    /// Instrument cell masses, sum to 1.
    pub q_hat: Vec<f64>,
    /// Propensity scores per instrument level.
    pub p_hat: Vec<f64>,
    /// Mean outcome among treated units per level.
    pub beta1_hat: Vec<f64>,
    /// Mean outcome among untreated units per level.
    pub beta0_hat: Vec<f64>,
    /// Within-cell outcome variances `[treated, untreated]` (divisor
    /// `1/n_cell`, matching the plug-in variance estimator).
    pub sigma2: [Vec<f64>; 2],
    /// Cell counts `[treated, untreated]`.
    pub counts: [Vec<u64>; 2],
    /// Total sample size.
    pub n: usize,
    /// Cells `(d, level)` whose variance estimate is zero (singleton cells
    /// or constant outcomes); inference preconditions fail there.
    pub degenerate_cells: Vec<(u8, usize)>,
    /// Instrument level labels (carried along for reporting).
    pub levels: Vec<String>,
}

impl CellStats {
    /// Number of instrument levels `K + 1`.
    pub fn n_levels(&self) -> usize {
        self.q_hat.len()
    }

    /// Stacked cell-mean vector `(beta_1', beta_0')'`.
    pub fn beta_stacked(&self) -> DVector<f64> {
        DVector::from_iterator(
            2 * self.n_levels(),
            self.beta1_hat.iter().chain(self.beta0_hat.iter()).copied(),
        )
    }

    /// Assemble cell statistics directly from population (or otherwise
    /// externally known) quantities, bypassing estimation. Useful for
    /// population-level analysis — e.g. evaluating weights or moment
    /// conditions at true values — and for constructing test fixtures.
    ///
    /// `n` only scales test statistics downstream; counts are apportioned
    /// as `n * q * p` rounded. Panics if the slice lengths disagree.
    pub fn from_population(
        p: &[f64],
        q: &[f64],
        beta1: &[f64],
        beta0: &[f64],
        sigma2_1: &[f64],
        sigma2_0: &[f64],
        n: usize,
    ) -> CellStats {
        let kp1 = p.len();
        assert!(
            [q.len(), beta1.len(), beta0.len(), sigma2_1.len(), sigma2_0.len()]
                .iter()
                .all(|&l| l == kp1),
            "population cell arrays must share a length"
        );
        let mut counts = [vec![0u64; kp1], vec![0u64; kp1]];
        for l in 0..kp1 {
            counts[0][l] = (n as f64 * q[l] * p[l]).round() as u64;
            counts[1][l] = (n as f64 * q[l] * (1.0 - p[l])).round() as u64;
        }
        CellStats {
            q_hat: q.to_vec(),
            p_hat: p.to_vec(),
            beta1_hat: beta1.to_vec(),
            beta0_hat: beta0.to_vec(),
            sigma2: [sigma2_1.to_vec(), sigma2_0.to_vec()],
            counts,
            n,
            degenerate_cells: Vec::new(),
            levels: (0..kp1).map(|l| format!("z{l}")).collect(),
        }
    }
}

/// Group the sample by (treatment, instrument level) and compute cell
/// statistics. Fails if any cell is empty or any propensity is 0 or 1.
pub fn cell_stats(data: &Dataset) -> Result<CellStats> {
    let kp1 = data.n_levels();
    if kp1 < 2 {
        return Err(Error::Config("need at least two instrument levels".into()));
    }
    let n = data.records.len();
    if n == 0 {
        return Err(Error::Data("empty dataset".into()));
    }

    // Welford accumulators per (arm, level); arm slot 0 = treated.
    let mut count = [vec![0u64; kp1], vec![0u64; kp1]];
    let mut mean = [vec![0f64; kp1], vec![0f64; kp1]];
    let mut m2 = [vec![0f64; kp1], vec![0f64; kp1]];
    for r in &data.records {
        debug_assert!(r.z < kp1 && r.d <= 1);
        let slot = if r.d == 1 { 0 } else { 1 };
        let c = &mut count[slot][r.z];
        *c += 1;
        let delta = r.y - mean[slot][r.z];
        mean[slot][r.z] += delta / *c as f64;
        m2[slot][r.z] += delta * (r.y - mean[slot][r.z]);
    }

    let mut degenerate = Vec::new();
    for l in 0..kp1 {
        for (slot, d) in [(0usize, 1u8), (1, 0)] {
            if count[slot][l] == 0 {
                return Err(Error::Overlap { d, z: data.instrument_levels[l].clone() });
            }
        }
    }

    let mut q_hat = vec![0f64; kp1];
    let mut p_hat = vec![0f64; kp1];
    let mut sigma2 = [vec![0f64; kp1], vec![0f64; kp1]];
    for l in 0..kp1 {
        let n_l = count[0][l] + count[1][l];
        q_hat[l] = n_l as f64 / n as f64;
        p_hat[l] = count[0][l] as f64 / n_l as f64;
        if p_hat[l] <= 0.0 || p_hat[l] >= 1.0 {
            return Err(Error::Overlap {
                d: if p_hat[l] <= 0.0 { 1 } else { 0 },
                z: data.instrument_levels[l].clone(),
            });
        }
        for slot in 0..2 {
            sigma2[slot][l] = m2[slot][l] / count[slot][l] as f64;
            if sigma2[slot][l] == 0.0 {
                let d = if slot == 0 { 1 } else { 0 };
                degenerate.push((d, l));
                log::warn!(
                    "degenerate outcome variance in cell (d={d}, z={}): {} observation(s)",
                    data.instrument_levels[l],
                    count[slot][l]
                );
            }
        }
    }

    Ok(CellStats {
        q_hat,
        p_hat,
        beta1_hat: mean[0].clone(),
        beta0_hat: mean[1].clone(),
        sigma2,
        counts: count,
        n,
        degenerate_cells: degenerate,
        levels: data.instrument_levels.clone(),
    })
}

/// Sampling covariance estimates for the cell statistics.
///
/// `sigma_p` and the two `sigma_beta` blocks are diagonal; `sigma_q` is the
/// full multinomial covariance `diag(q_hat) - q_hat q_hat'` of the cell
/// masses, whose rows sum to zero by construction.
#[derive(Debug, Clone)]
pub struct CovarianceSet {
    pub sigma_p: DMatrix<f64>,
    pub sigma_q: DMatrix<f64>,
    pub sigma_beta1: DMatrix<f64>,
    pub sigma_beta0: DMatrix<f64>,
}

impl CovarianceSet {
    /// Block-diagonal stack `diag(sigma_beta1, sigma_beta0)`.
    pub fn sigma_beta(&self) -> DMatrix<f64> {
        crate::linalg::block_diag2(&self.sigma_beta1, &self.sigma_beta0)
    }
}

/// Build the covariance estimates from cell statistics.
pub fn covariance_estimates(stats: &CellStats) -> Result<CovarianceSet> {
    let kp1 = stats.n_levels();
    let q = DVector::from_column_slice(&stats.q_hat);
    let p = DVector::from_column_slice(&stats.p_hat);

    let sigma_p = DMatrix::from_diagonal(&DVector::from_iterator(
        kp1,
        (0..kp1).map(|l| p[l] * (1.0 - p[l]) / q[l]),
    ));
    let sigma_q = DMatrix::from_diagonal(&q) - &q * q.transpose();
    let sigma_beta1 = DMatrix::from_diagonal(&DVector::from_iterator(
        kp1,
        (0..kp1).map(|l| stats.sigma2[0][l] / (p[l] * q[l])),
    ));
    let sigma_beta0 = DMatrix::from_diagonal(&DVector::from_iterator(
        kp1,
        (0..kp1).map(|l| stats.sigma2[1][l] / ((1.0 - p[l]) * q[l])),
    ));
    Ok(CovarianceSet { sigma_p, sigma_q, sigma_beta1, sigma_beta0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    /// Hand-checkable sample: level "a" has treated outcomes {1, 3} and
    /// untreated {0, 2, 4}; level "b" has treated {6, 6, 9} and untreated {5}.
    fn toy() -> Dataset {
        let y = vec![1.0, 3.0, 0.0, 2.0, 4.0, 6.0, 6.0, 9.0, 5.0];
        let d = vec![1, 1, 0, 0, 0, 1, 1, 1, 0];
        let z = vec![0, 0, 0, 0, 0, 1, 1, 1, 1];
        Dataset::from_parts(y, d, z, vec!["a".into(), "b".into()])
    }

    #[test]
    fn group_by_recomputation_matches_exactly() {
        let s = cell_stats(&toy()).unwrap();
        assert_eq!(s.n, 9);
        assert_eq!(s.counts, [vec![2, 3], vec![3, 1]]);
        assert_abs_diff_eq!(s.q_hat[0], 5.0 / 9.0, epsilon = 0.0);
        assert_abs_diff_eq!(s.q_hat[1], 4.0 / 9.0, epsilon = 0.0);
        assert_abs_diff_eq!(s.p_hat[0], 2.0 / 5.0, epsilon = 0.0);
        assert_abs_diff_eq!(s.p_hat[1], 3.0 / 4.0, epsilon = 0.0);
        assert_abs_diff_eq!(s.beta1_hat[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.beta0_hat[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.beta1_hat[1], 7.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.beta0_hat[1], 5.0, epsilon = 1e-15);
        // Treated "a": mean 2, deviations (-1, 1) -> sigma2 = 1.
        assert_abs_diff_eq!(s.sigma2[0][0], 1.0, epsilon = 1e-15);
        // Untreated "a": deviations (-2, 0, 2) -> 8/3.
        assert_abs_diff_eq!(s.sigma2[1][0], 8.0 / 3.0, epsilon = 1e-14);
        // Treated "b": (6,6,9), mean 7 -> (1+1+4)/3 = 2.
        assert_abs_diff_eq!(s.sigma2[0][1], 2.0, epsilon = 1e-14);
        // Untreated "b" is a singleton -> variance 0, flagged.
        assert_eq!(s.sigma2[1][1], 0.0);
        assert_eq!(s.degenerate_cells, vec![(0, 1)]);
        let qsum: f64 = s.q_hat.iter().sum();
        assert_abs_diff_eq!(qsum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn overlap_violations_are_reported() {
        // All units treated at level "b".
        let data = Dataset::from_parts(
            vec![1.0, 0.0, 2.0, 3.0],
            vec![1, 0, 1, 1],
            vec![0, 0, 1, 1],
            vec!["a".into(), "b".into()],
        );
        let err = cell_stats(&data).unwrap_err();
        assert_eq!(err.to_string(), "overlap violated at (d=0, z=b)");

        // Level with no observations at all.
        let data2 = Dataset::from_parts(
            vec![1.0, 0.0],
            vec![1, 0],
            vec![0, 0],
            vec!["a".into(), "b".into()],
        );
        assert!(matches!(cell_stats(&data2), Err(Error::Overlap { .. })));
    }

    #[test]
    fn covariances_have_documented_structure() {
        let s = cell_stats(&toy()).unwrap();
        let cov = covariance_estimates(&s).unwrap();
        let kp1 = 2;
        for i in 0..kp1 {
            let row_sum: f64 = (0..kp1).map(|j| cov.sigma_q[(i, j)]).sum();
            assert_abs_diff_eq!(row_sum, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(
                cov.sigma_p[(i, i)],
                s.p_hat[i] * (1.0 - s.p_hat[i]) / s.q_hat[i],
                epsilon = 1e-15
            );
            assert_abs_diff_eq!(
                cov.sigma_beta1[(i, i)],
                s.sigma2[0][i] / (s.p_hat[i] * s.q_hat[i]),
                epsilon = 1e-13
            );
        }
        let (min_eig, _) = crate::linalg::eig_range_sym(&cov.sigma_q);
        assert!(min_eig > -1e-12, "sigma_q not PSD: min eig {min_eig}");
        let sb = cov.sigma_beta();
        assert_eq!(sb.shape(), (4, 4));
        assert_eq!(sb[(0, 2)], 0.0);
        assert_abs_diff_eq!(sb[(2, 2)], cov.sigma_beta0[(0, 0)], epsilon = 0.0);
    }

    #[test]
    fn balanced_half_sample_covariance_example() {
        // p_hat = q_hat = (1/2, 1/2) gives sigma_p = diag(1/2, 1/2).
        let y = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let d = vec![1, 0, 1, 0, 1, 0, 1, 0];
        let z = vec![0, 0, 1, 1, 0, 0, 1, 1];
        let data = Dataset::from_parts(y, d, z, vec!["a".into(), "b".into()]);
        let cov = covariance_estimates(&cell_stats(&data).unwrap()).unwrap();
        assert_abs_diff_eq!(cov.sigma_p[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(cov.sigma_p[(1, 1)], 0.5, epsilon = 1e-15);
        assert_eq!(cov.sigma_p[(0, 1)], 0.0);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sample.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "y,d,z\n1.5,1,b\n2.5,0,a\n0.5,1,a\n3.5,0,b").unwrap();
        drop(f);
        let data = load_csv(&path, &CsvSchema::default()).unwrap();
        // Lexicographic default ordering: a, b.
        assert_eq!(data.instrument_levels, vec!["a", "b"]);
        assert_eq!(data.records[0], Record { y: 1.5, d: 1, z: 1, w: None });
        assert_eq!(data.records[2], Record { y: 0.5, d: 1, z: 0, w: None });

        // Configured ordering overrides and pins the baseline.
        let schema = CsvSchema {
            instrument_levels: Some(vec!["b".into(), "a".into()]),
            ..CsvSchema::default()
        };
        let data2 = load_csv(&path, &schema).unwrap();
        assert_eq!(data2.records[0].z, 0);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "y,d,z\n1.0,2,a\n").unwrap();
        let err = load_csv(&bad, &CsvSchema::default()).unwrap_err();
        assert!(err.to_string().contains("invalid treatment value"), "{err}");

        let missing = dir.path().join("missing.csv");
        std::fs::write(&missing, "y,treat,z\n1.0,1,a\n").unwrap();
        let err2 = load_csv(&missing, &CsvSchema::default()).unwrap_err();
        assert!(err2.to_string().contains("missing column"), "{err2}");
    }

    #[test]
    fn json_field_names_are_stable() {
        let s = cell_stats(&toy()).unwrap();
        let json = serde_json::to_value(&s).unwrap();
        for key in ["q_hat", "p_hat", "beta1_hat", "beta0_hat", "sigma2", "counts", "n"] {
            assert!(json.get(key).is_some(), "missing field {key}");
        }
        assert_eq!(json["n"], 9);
        assert_eq!(json["sigma2"].as_array().unwrap().len(), 2);
    }
}
