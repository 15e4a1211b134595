//! Policy-value estimators and confounding-robust bounds.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::data::{ActionKind, Dataset, SyntheticTruth};
use crate::dualsolve::{
    recover_primal_weights, solve_dual, DualParams, DualProblem, LossModel, SolverOptions, SolverStatus, Target,
};
use crate::error::{invalid, CrispError, Result};
use crate::kernels::{quantile_feature_basis, ConstraintBasis};
use crate::policy::Policy;
use crate::sensitivity::{BoxKind, BoxModel, Direction, SensitivityModel};

/// `r_i = pi(T_i|X_i) / p_obs_i * Y_i`.
pub fn reparametrized_rewards(d: &Dataset, policy: &Policy) -> Result<DVector<f64>> {
    let p = d.propensities()?;
    Ok(DVector::from_iterator(
        d.len(),
        (0..d.len()).map(|i| policy.prob(d.t()[i], &d.context(i)) / p[i] * d.y()[i]),
    ))
}

/// Inverse probability weighting: `mean(pi / p_obs * Y)`.
pub fn ipw(d: &Dataset, policy: &Policy) -> Result<f64> {
    Ok(reparametrized_rewards(d, policy)?.mean())
}

/// Hajek estimator: `sum(pi / p_obs * Y) / sum(1 / p_obs)`.
pub fn hajek(d: &Dataset, policy: &Policy) -> Result<f64> {
    let p = d.propensities()?;
    let num = reparametrized_rewards(d, policy)?.sum();
    let den: f64 = p.iter().map(|v| 1.0 / v).sum();
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Ipw,
    Hajek,
    Kcmc,
    Zsb,
    Qb,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::Hajek => "hajek",
            EstimatorKind::Kcmc => "kcmc",
            EstimatorKind::Zsb => "zsb",
            EstimatorKind::Qb => "qb",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Tie repair above this share of samples is flagged in reports.
pub const TIE_FLAG_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub tie_fraction: f64,
    pub constraint_residual: f64,
    pub status: SolverStatus,
    pub iterations: usize,
    pub effective_dim: usize,
    /// Constraint violation left by the slack rule (ZSB only).
    pub slack: Option<f64>,
}

impl Diagnostics {
    pub fn status_label(&self) -> String {
        let mut s = self.status.as_str().to_string();
        if self.tie_fraction > TIE_FLAG_FRACTION {
            s.push_str("+tie-repair");
        }
        if let Some(sl) = self.slack {
            if sl > 0.0 {
                s.push_str("+slack");
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct BoundReport {
    pub estimator: EstimatorKind,
    pub model: SensitivityModel,
    pub direction: Direction,
    pub value: f64,
    /// Primal weights `w~`.
    pub weights: DVector<f64>,
    pub dual: DualParams,
    pub basis_label: String,
    pub diagnostics: Diagnostics,
    /// The solved problem, kept for inference.
    pub problem: DualProblem,
}

impl BoundReport {
    pub const CSV_HEADER: &'static str = "estimator,model,param,direction,value,residual,tie_fraction,status";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.10},{:.3e},{:.6},{}",
            self.estimator,
            self.model.name(),
            self.model.param(),
            self.direction,
            self.value,
            self.diagnostics.constraint_residual,
            self.diagnostics.tie_fraction,
            self.diagnostics.status_label()
        )
    }

    /// Per-sample dual losses at the solution.
    pub fn losses(&self) -> DVector<f64> {
        self.problem.losses(&self.dual)
    }
}

/// KCMC bound with default solver settings.
pub fn kcmc_bound(
    d: &Dataset,
    policy: &Policy,
    model: &SensitivityModel,
    basis: &ConstraintBasis,
    direction: Direction,
) -> Result<BoundReport> {
    kcmc_bound_with(d, policy, model, basis, direction, &SolverOptions::default(), None)
}

/// Builds the dual problem for `d` without solving it.
pub fn kcmc_problem(
    d: &Dataset,
    policy: &Policy,
    model: &SensitivityModel,
    basis: &ConstraintBasis,
    direction: Direction,
) -> Result<DualProblem> {
    kcmc_problem_with_psi(d, policy, model, basis.psi(), basis.includes_constant(), direction)
}

pub(crate) fn kcmc_problem_with_psi(
    d: &Dataset,
    policy: &Policy,
    model: &SensitivityModel,
    psi: &DMatrix<f64>,
    includes_constant: bool,
    direction: Direction,
) -> Result<DualProblem> {
    if psi.nrows() != d.len() {
        return Err(CrispError::Dimension(format!("basis has {} rows, data has {}", psi.nrows(), d.len())));
    }
    let r = reparametrized_rewards(d, policy)?;
    let p = d.propensities()?;
    match model {
        SensitivityModel::Box(bm) => {
            let mut a = DVector::zeros(d.len());
            let mut b = DVector::zeros(d.len());
            for i in 0..d.len() {
                let (ai, bi) = bm.bounds(p[i])?;
                a[i] = ai;
                b[i] = bi;
            }
            DualProblem::new(r, psi.clone(), LossModel::Box { a, b }, direction)
        }
        SensitivityModel::F(fm) => {
            let has_const = includes_constant || (0..psi.ncols()).any(|j| psi.column(j).iter().all(|v| *v == 1.0));
            let psi = if fm.add_mean_one_constraint && !has_const {
                psi.clone().insert_column(0, 1.0)
            } else {
                psi.clone()
            };
            DualProblem::new(r, psi, LossModel::F { divergence: fm.generator, gamma: fm.gamma }, direction)
        }
    }
}

/// Solves a prepared problem and packages the report.
pub(crate) fn solve_problem(
    prob: DualProblem,
    estimator: EstimatorKind,
    model: &SensitivityModel,
    basis_label: &str,
    opts: &SolverOptions,
    warm: Option<&DualParams>,
) -> Result<BoundReport> {
    let sol = solve_dual(&prob, opts, warm)?;
    let pw = recover_primal_weights(&sol.params, &prob, opts.tie_tol);
    let value = prob.bound_from_objective(sol.objective);
    let diagnostics = Diagnostics {
        tie_fraction: pw.ties as f64 / prob.len() as f64,
        constraint_residual: prob.constraint_residual(&pw.weights),
        status: sol.status,
        iterations: sol.iterations,
        effective_dim: sol.effective_dim,
        slack: None,
    };
    if diagnostics.tie_fraction > TIE_FLAG_FRACTION {
        log::info!("{estimator}: {:.2}% of samples tie-repaired", 100.0 * diagnostics.tie_fraction);
    }
    Ok(BoundReport {
        estimator,
        model: *model,
        direction: prob.direction(),
        value,
        weights: pw.weights,
        dual: sol.params,
        basis_label: basis_label.to_string(),
        diagnostics,
        problem: prob,
    })
}

/// KCMC bound: minimum (or maximum) of `mean(w~ r)` subject to the kernel
/// moment constraints and the sensitivity model. `warm` seeds the solver.
pub fn kcmc_bound_with(
    d: &Dataset,
    policy: &Policy,
    model: &SensitivityModel,
    basis: &ConstraintBasis,
    direction: Direction,
    opts: &SolverOptions,
    warm: Option<&DualParams>,
) -> Result<BoundReport> {
    let prob = kcmc_problem(d, policy, model, basis, direction)?;
    solve_problem(prob, EstimatorKind::Kcmc, model, basis.label(), opts, warm)
}

/// ZSB bound with default solver settings.
pub fn zsb_bound(d: &Dataset, policy: &Policy, bm: &BoxModel, direction: Direction) -> Result<BoundReport> {
    zsb_bound_with(d, policy, bm, direction, &SolverOptions::default())
}

/// Box bound under per-action mean-one constraints `mean(1{T=t} w) = 1`.
///
/// The action groups decouple. A group whose attainable range excludes the
/// target is pinned at the violation-minimal face (all `a` or all `b`) and
/// the violation is reported as slack.
pub fn zsb_bound_with(
    d: &Dataset,
    policy: &Policy,
    bm: &BoxModel,
    direction: Direction,
    opts: &SolverOptions,
) -> Result<BoundReport> {
    if d.action_kind() != ActionKind::Binary {
        return Err(CrispError::Unsupported("ZSB constraints need discrete actions".into()));
    }
    let n = d.len();
    let nf = n as f64;
    let r = reparametrized_rewards(d, policy)?;
    let p = d.propensities()?;
    let mut a = DVector::zeros(n);
    let mut b = DVector::zeros(n);
    for i in 0..n {
        let (ai, bi) = bm.bounds(p[i])?;
        a[i] = ai;
        b[i] = bi;
    }
    let psi = DMatrix::from_fn(n, 2, |i, k| if d.t()[i] == k as f64 { 1.0 / p[i] } else { 0.0 });
    let full = DualProblem::new(r.clone(), psi, LossModel::Box { a: a.clone(), b: b.clone() }, direction)?
        .with_target(Target::Fixed(DVector::from_element(2, 1.0)))?;

    let mut w = DVector::zeros(n);
    let mut eta = DVector::zeros(2);
    let mut slack = 0.0;
    let mut ties = 0;
    let mut status = SolverStatus::Converged;
    let mut iterations = 0;
    for (k, action) in [0.0, 1.0].into_iter().enumerate() {
        let idx: Vec<usize> = (0..n).filter(|&i| d.t()[i] == action).collect();
        if idx.is_empty() {
            slack += 1.0;
            continue;
        }
        let lo: f64 = idx.iter().map(|&i| a[i] / p[i]).sum();
        let hi: f64 = idx.iter().map(|&i| b[i] / p[i]).sum();
        let tol = 1e-12 * nf;
        if nf < lo - tol || nf > hi + tol {
            let pick_a = nf < lo;
            for &i in &idx {
                w[i] = if pick_a { a[i] } else { b[i] };
            }
            slack += if pick_a { lo - nf } else { nf - hi } / nf;
            status = SolverStatus::Degenerate;
            continue;
        }
        let ng = idx.len();
        let sub_r = DVector::from_iterator(ng, idx.iter().map(|&i| r[i]));
        let sub_psi = DMatrix::from_fn(ng, 1, |j, _| 1.0 / p[idx[j]]);
        let sub_a = DVector::from_iterator(ng, idx.iter().map(|&i| a[i]));
        let sub_b = DVector::from_iterator(ng, idx.iter().map(|&i| b[i]));
        let sub = DualProblem::new(sub_r, sub_psi, LossModel::Box { a: sub_a, b: sub_b }, direction)?
            .with_target(Target::Fixed(DVector::from_element(1, nf / ng as f64)))?;
        let sol = solve_dual(&sub, opts, None)?;
        iterations += sol.iterations;
        if sol.status == SolverStatus::MaxIterations {
            status = sol.status;
        }
        let pw = recover_primal_weights(&sol.params, &sub, opts.tie_tol);
        ties += pw.ties;
        for (j, &i) in idx.iter().enumerate() {
            w[i] = pw.weights[j];
        }
        eta[k] = sol.params.eta[0];
    }
    if slack > 0.0 {
        log::warn!("ZSB constraints infeasible inside the box; slack {slack:.3e}");
    }
    let value = w.dot(&r) / nf;
    let model = SensitivityModel::Box(*bm);
    Ok(BoundReport {
        estimator: EstimatorKind::Zsb,
        model,
        direction,
        value,
        diagnostics: Diagnostics {
            tie_fraction: ties as f64 / nf,
            constraint_residual: full.constraint_residual(&w),
            status,
            iterations,
            effective_dim: 2,
            slack: Some(slack),
        },
        weights: w,
        dual: DualParams { eta_f: 0.0, eta },
        basis_label: "zsb".into(),
        problem: full,
    })
}

/// QB bound with default solver settings.
pub fn qb_bound(
    d: &Dataset,
    policy: &Policy,
    gamma: f64,
    features: &ConstraintBasis,
    direction: Direction,
) -> Result<BoundReport> {
    qb_bound_with(d, policy, gamma, features, direction, &SolverOptions::default())
}

/// Linear `tau`-quantile regression of `y` on the rows of `x` (pinball loss).
pub fn quantile_regression(y: &DVector<f64>, x: &DMatrix<f64>, tau: f64, opts: &SolverOptions) -> Result<DVector<f64>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(invalid(format!("quantile level must lie in (0, 1), got {tau}")));
    }
    let n = y.len();
    let prob = DualProblem::new(
        y.clone(),
        x.clone(),
        LossModel::Box { a: DVector::from_element(n, 1.0 - tau), b: DVector::from_element(n, 2.0 - tau) },
        Direction::Lower,
    )?;
    Ok(solve_dual(&prob, opts, None)?.params.eta)
}

/// Two-stage quantile balancing. Stage one regresses the `1/(1+Gamma)`
/// quantile of the (signed) outcome on `psi * p_obs / pi`; stage two imposes
/// the single balancing constraint on the fitted quantile, plus the constant
/// when `features` carries one.
pub fn qb_bound_with(
    d: &Dataset,
    policy: &Policy,
    gamma: f64,
    features: &ConstraintBasis,
    direction: Direction,
    opts: &SolverOptions,
) -> Result<BoundReport> {
    let bm = BoxModel { kind: BoxKind::Tan, gamma };
    bm.bounds(0.5)?;
    let p = d.propensities()?;
    let psi = features.psi();
    if psi.nrows() != d.len() {
        return Err(CrispError::Dimension("feature basis does not match the data".into()));
    }
    let ratio: Vec<f64> = (0..d.len()).map(|i| policy.prob(d.t()[i], &d.context(i)) / p[i]).collect();
    if ratio.iter().any(|v| !(*v > 0.0)) {
        return Err(invalid("QB features need pi(t|x) > 0 on the data"));
    }
    let phi = DMatrix::from_fn(d.len(), psi.ncols(), |i, j| psi[(i, j)] / ratio[i]);
    let ys = d.y() * direction.sign();
    let q = quantile_regression(&ys, &phi, bm.tau(), opts)?;
    let qmat = DMatrix::from_column_slice(q.len(), 1, q.as_slice());
    let qb_basis = features.combine(&qmat, features.includes_constant(), "qb")?;
    let model = SensitivityModel::Box(bm);
    let prob = kcmc_problem(d, policy, &model, &qb_basis, direction)?;
    let mut rep = solve_problem(prob, EstimatorKind::Qb, &model, "qb", opts, None)?;
    rep.estimator = EstimatorKind::Qb;
    Ok(rep)
}

/// Root-mean-square residual of projecting `eta*_CMC = (pi/p_obs) Q_tau` onto
/// the span of a basis, on a fresh sample of size `n_grid`. The builder
/// receives that sample and returns the basis evaluated on it.
pub fn specification_residual(
    truth: &SyntheticTruth,
    policy: &Policy,
    gamma: f64,
    builder: &dyn Fn(&Dataset) -> Result<ConstraintBasis>,
    n_grid: usize,
    seed: u64,
) -> Result<f64> {
    if truth.action_kind != ActionKind::Binary {
        return Err(CrispError::Unsupported("the analytic quantile needs binary synthetic data".into()));
    }
    let bm = BoxModel::tan(gamma);
    bm.bounds(0.5)?;
    let d = truth.sample(n_grid, seed)?;
    let p = d.propensities()?;
    let target = DVector::from_iterator(
        d.len(),
        (0..d.len()).map(|i| {
            let x = d.context(i);
            let t = d.t()[i];
            policy.prob(t, &x) / p[i] * truth.outcome_quantile(t, &x, bm.tau())
        }),
    );
    let basis = builder(&d)?;
    if basis.len() != d.len() {
        return Err(CrispError::Dimension("basis builder returned the wrong number of rows".into()));
    }
    let psi = basis.psi();
    let svd = psi.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(1e-300);
    let coef = svd.solve(&target, tol).map_err(|e| invalid(e.to_string()))?;
    let resid = psi * coef - &target;
    Ok((resid.norm_squared() / d.len() as f64).sqrt())
}

/// Basis builder for the exact conditional-quantile feature of the synthetic truth.
pub fn exact_quantile_basis(
    truth: &SyntheticTruth,
    policy: &Policy,
    gamma: f64,
) -> impl Fn(&Dataset) -> Result<ConstraintBasis> {
    let truth = std::sync::Arc::new(truth.clone());
    let policy = policy.clone();
    let tau = 1.0 / (1.0 + gamma);
    move |d: &Dataset| {
        let tq = truth.clone();
        let tp = truth.clone();
        quantile_feature_basis(
            &policy,
            d,
            std::sync::Arc::new(move |t: f64, x: &[f64]| tq.outcome_quantile(t, x, tau)),
            std::sync::Arc::new(move |t: f64, x: &[f64]| tp.propensity(t, x)),
        )
    }
}
