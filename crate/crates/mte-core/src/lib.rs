//! Weak-instrument-robust inference for treatment-effect parameters in
//! marginal treatment effect (MTE) models with discrete instruments.
//!
//! The library estimates polynomial MTE models from (outcome, treatment,
//! instrument) microdata and tests linear hypotheses about treatment-effect
//! parameters (ATE, ATT, LATE, policy-relevant effects, ...) with procedures
//! whose size is robust to weak or partially identifying instruments:
//!
//! * Anderson–Rubin style moment tests and a conditional Wald test for the
//!   linear (two-parameter) MTE specification ([`linear`]),
//! * a modified linear-combination (MLC) test that combines a moment-based
//!   conditional-likelihood statistic with an Anderson–Rubin penalty for
//!   general polynomial specifications ([`mlc`]),
//! * classical Wald tests for comparison, plus an identification-strength
//!   pretest ([`mlc::pretest_ics`]).
//!
//! Supporting modules: cell-level summary statistics and their sampling
//! covariances ([`data`]), polynomial basis and control functions
//! ([`basis`]), target-parameter weight vectors ([`weights`]),
//! covariate-cell aggregation of confidence intervals ([`aggregate`]),
//! misspecification-bias formulas for omitted interaction terms ([`bias`]),
//! and Monte Carlo drivers for size/power experiments ([`sim`]).
//!
//! All randomized procedures take explicit seeds and are bit-for-bit
//! reproducible at fixed thread counts.

pub mod aggregate;
pub mod basis;
pub mod bias;
pub mod data;
mod error;
pub mod linalg;
pub mod linear;
pub mod mlc;
pub mod optim;
pub mod rng;
pub mod sim;
pub mod weights;

pub use aggregate::{aggregate_estimated_mass, aggregate_known_mass, sidak_level, CellCi};
pub use basis::{
    basis_h, build_a, build_h, build_mj, control_lambda, control_lambda_deriv, BasisKind,
    DesignMatrices, MteSpec,
};
pub use bias::{
    bias_ate_cate_slope, bias_estimand_gaps, bias_general, two_stage_singularity, ArmBias,
    ArmMoments, BiasInputs, BiasSample, EstimandBias, LogitDesign, SingularityReport,
    TwoStageDesign,
};
pub use data::{cell_stats, covariance_estimates, load_csv, CellStats, CovarianceSet, CsvSchema, Dataset, Record};
pub use error::{Error, Result};
pub use linear::{
    ar_test, cond_wald_test, invert_ci, linear_ci, moment_g, wald_point, wald_test, CiMethod,
    ConfidenceSet, GridSpec, LinearContext, TestResult, DEFAULT_DRAWS,
};
pub use mlc::{
    classical_wald, efficient_estimate, efficient_estimate_unrestricted, mixture_quantile, mlc_ci, mlc_parts, mlc_stat, mlc_test,
    omega_hat, pretest_ics, profile_mlc, profile_mlc_anchored, EffEstimate, MlcContext, MlcParts,
    PretestResult, ProfiledResult, MIXTURE_DRAWS,
};
pub use optim::OptSpec;
pub use sim::{
    default_power_grid, default_size_grid, dgp_sample, power_curve, size_surface, DgpSpec, Method,
    RunOpts, SweepKind, SweepResult, SweepRow,
};
pub use weights::{
    counterfactual_propensity, counterfactual_propensity_deriv, weight_gradients, weight_vector,
    PolicySpec, Target, WeightVector,
};

/// Library version string (for embedding in CLI output).
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
