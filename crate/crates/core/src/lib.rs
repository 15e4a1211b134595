//! Confounding-robust bounds on offline contextual-bandit policy value.
//!
//! Lower and upper bounds are computed from kernel conditional moment
//! constraints under box or f-divergence sensitivity models, by solving
//! a convex dual.

// NaN must fail these guards
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod data;
pub mod dualsolve;
pub mod error;
pub mod estimators;
pub mod kernels;
pub mod policy;
pub mod sensitivity;
pub mod stats;

pub use asymptotics::{
    confidence_interval, cross_validate, gic, sandwich, DensityCentering, SandwichEstimates, SandwichOptions,
};
pub use data::{
    fit_propensity_logistic, generate_binary_synthetic, generate_continuous_synthetic, load_csv, true_sharp_bound_mc,
    true_sharp_bound_mc_with_se, write_csv, ActionKind, CsvSchema, Dataset, McEstimate, PropensityFit, SyntheticTruth,
};
pub use dualsolve::{
    solve_dual, DualParams, DualProblem, DualSolution, LossModel, SolverOptions, SolverStatus, Target,
};
pub use error::{CrispError, Result};
pub use estimators::{
    exact_quantile_basis, hajek, ipw, kcmc_bound, kcmc_bound_with, qb_bound, qb_bound_with, specification_residual, zsb_bound, zsb_bound_with,
    BoundReport, Diagnostics, EstimatorKind,
};
pub use kernels::{arm_linear_basis, gram_matrix, kpca_basis, quantile_feature_basis, median_heuristic, ConstraintBasis, KernelSpec, KpcaOptions};
pub use policy::{danskin_gradient, learn_policy_maxmin, InnerEstimator, LearnOptions, LearnResult, LearnStep, Policy, TestSet};
pub use sensitivity::{BoxKind, BoxModel, Direction, Divergence, FDivergenceModel, SensitivityModel};
