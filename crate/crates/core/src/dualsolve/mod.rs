//! Dual ERM for the lower-bound programs.
//!
//! A lower bound on `mean(w~ r)` over weights satisfying
//! `mean(w~ psi) = c` and the sensitivity model is the negative minimum of
//!
//! ```text
//! L(theta) = eta_f gamma - eta'c + mean_i eta_f f*((eta'psi_i - r_i) / eta_f)
//! ```
//!
//! with `eta_f` fixed to zero (and `f*` taken as the box conjugate) on the
//! box path. Upper bounds negate `r` and the final value.

mod box_path;
mod f_path;
mod weights;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, CrispError, Result};
use crate::sensitivity::{box_conjugate, Conjugate, Direction, Divergence};

pub use box_path::solve_box_dual;
pub use f_path::{solve_f_dual, tv_smoothed};
pub use weights::{recover_primal_weights, PrimalWeights};

/// `theta = (eta_f, eta)`. `eta_f` is zero on the box path.
#[derive(Debug, Clone, PartialEq)]
pub struct DualParams {
    pub eta_f: f64,
    pub eta: DVector<f64>,
}

impl DualParams {
    pub fn zeros(dim: usize) -> Self {
        Self { eta_f: 0.0, eta: DVector::zeros(dim) }
    }
}

/// Right-hand side of the moment constraints.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// `c = mean_i psi_i`, i.e. `mean((w~ - 1) psi) = 0`.
    SampleMean,
    /// A fixed vector.
    Fixed(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossModel {
    Box { a: DVector<f64>, b: DVector<f64> },
    F { divergence: Divergence, gamma: f64 },
}

#[derive(Debug, Clone)]
pub struct DualProblem {
    /// Rewards with the direction sign applied.
    r: DVector<f64>,
    psi: DMatrix<f64>,
    target: Target,
    model: LossModel,
    direction: Direction,
}

/// Loss of one sample: value and the subdifferential of `f*` at the
/// sample's argument. Gradients are affine in the chosen slope.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub value: f64,
    pub slope_lo: f64,
    pub slope_hi: f64,
    /// Argument of `f*` (`v` on the f-path, `h - r` on the box path).
    pub arg: f64,
    pub conj_value: f64,
}

impl DualProblem {
    pub fn new(
        r: DVector<f64>,
        psi: DMatrix<f64>,
        model: LossModel,
        direction: Direction,
    ) -> Result<Self> {
        let n = r.len();
        if n == 0 {
            return Err(invalid("dual problem needs at least one sample"));
        }
        if psi.nrows() != n {
            return Err(CrispError::Dimension(format!("psi has {} rows, r has {n}", psi.nrows())));
        }
        if !r.iter().all(|v| v.is_finite()) || !psi.iter().all(|v| v.is_finite()) {
            return Err(invalid("rewards and basis must be finite"));
        }
        match &model {
            LossModel::Box { a, b } => {
                if a.len() != n || b.len() != n {
                    return Err(CrispError::Dimension("box bounds must have one entry per sample".into()));
                }
                if a.iter().zip(b.iter()).any(|(x, y)| !(x <= y) || !x.is_finite() || !y.is_finite()) {
                    return Err(invalid("box bounds must satisfy a <= b"));
                }
            }
            LossModel::F { gamma, .. } => {
                if !(*gamma >= 0.0) || !gamma.is_finite() {
                    return Err(invalid("gamma must be finite and >= 0"));
                }
            }
        }
        let r = r * direction.sign();
        Ok(Self { r, psi, target: Target::SampleMean, model, direction })
    }

    pub fn with_target(mut self, target: Target) -> Result<Self> {
        if let Target::Fixed(c) = &target {
            if c.len() != self.psi.ncols() {
                return Err(CrispError::Dimension("target length must equal basis dimension".into()));
            }
        }
        self.target = target;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.psi.ncols()
    }

    /// Signed rewards (negated for upper bounds).
    pub fn r(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn model(&self) -> &LossModel {
        &self.model
    }

    pub fn target(&self) -> &Target {
        &self.target
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn is_box(&self) -> bool {
        matches!(self.model, LossModel::Box { .. })
    }

    /// Target vector `c`.
    pub fn c(&self) -> DVector<f64> {
        match &self.target {
            Target::SampleMean => {
                let n = self.len() as f64;
                DVector::from_iterator(self.dim(), self.psi.column_iter().map(|col| col.sum() / n))
            }
            Target::Fixed(c) => c.clone(),
        }
    }

    /// Index of a column equal to one everywhere.
    pub fn constant_column(&self) -> Option<usize> {
        (0..self.dim()).find(|&j| self.psi.column(j).iter().all(|v| *v == 1.0))
    }

    /// Per-sample share of `eta'c`.
    fn target_term(&self, eta: &DVector<f64>, i: usize, c: &DVector<f64>) -> f64 {
        match &self.target {
            Target::SampleMean => self.psi.row(i).dot(&eta.transpose()),
            Target::Fixed(_) => c.dot(eta),
        }
    }

    fn h(&self, eta: &DVector<f64>) -> DVector<f64> {
        &self.psi * eta
    }

    fn conj(&self, i: usize, v: f64) -> Conjugate {
        match &self.model {
            LossModel::Box { a, b } => box_conjugate(a[i], b[i], v),
            LossModel::F { divergence, .. } => divergence.conjugate(v),
        }
    }

    /// Value and conjugate subdifferential of sample `i`'s loss.
    pub fn sample_loss(&self, theta: &DualParams, i: usize) -> SampleLoss {
        let c = self.c();
        self.sample_loss_with(theta, i, &c, self.psi.row(i).dot(&theta.eta.transpose()))
    }

    fn sample_loss_with(&self, theta: &DualParams, i: usize, c: &DVector<f64>, h: f64) -> SampleLoss {
        let lin = self.target_term(&theta.eta, i, c);
        match &self.model {
            LossModel::Box { .. } => {
                let u = h - self.r[i];
                let cj = self.conj(i, u);
                SampleLoss { value: -lin + cj.value, slope_lo: cj.lo, slope_hi: cj.hi, arg: u, conj_value: cj.value }
            }
            LossModel::F { gamma, .. } => {
                let ef = theta.eta_f;
                if !(ef > 0.0) {
                    return SampleLoss {
                        value: f64::INFINITY,
                        slope_lo: f64::INFINITY,
                        slope_hi: f64::NEG_INFINITY,
                        arg: f64::NAN,
                        conj_value: f64::INFINITY,
                    };
                }
                let v = (h - self.r[i]) / ef;
                let cj = self.conj(i, v);
                SampleLoss {
                    value: ef * gamma - lin + ef * cj.value,
                    slope_lo: cj.lo,
                    slope_hi: cj.hi,
                    arg: v,
                    conj_value: cj.value,
                }
            }
        }
    }

    /// Subgradient of sample `i`'s loss over `theta` with conjugate slope `s`.
    /// On the f-path the first entry is the `eta_f` component.
    pub fn sample_subgradient(&self, theta: &DualParams, i: usize, loss: &SampleLoss, s: f64) -> DVector<f64> {
        let c = self.c();
        let psi_i = self.psi.row(i).transpose();
        let lin_grad = match &self.target {
            Target::SampleMean => psi_i.clone(),
            Target::Fixed(_) => c,
        };
        let g_eta = &psi_i * s - lin_grad;
        match &self.model {
            LossModel::Box { .. } => g_eta,
            LossModel::F { gamma, .. } => {
                let _ = theta;
                let g_f = gamma + loss.conj_value - loss.arg * s;
                let mut g = DVector::zeros(self.dim() + 1);
                g[0] = g_f;
                g.rows_mut(1, self.dim()).copy_from(&g_eta);
                g
            }
        }
    }

    /// All per-sample losses.
    pub fn losses(&self, theta: &DualParams) -> DVector<f64> {
        let c = self.c();
        let h = self.h(&theta.eta);
        DVector::from_iterator(self.len(), (0..self.len()).map(|i| self.sample_loss_with(theta, i, &c, h[i]).value))
    }

    /// Empirical dual objective `L(theta)`.
    pub fn mean_loss(&self, theta: &DualParams) -> f64 {
        let c = self.c();
        let h = self.h(&theta.eta);
        let n = self.len() as f64;
        let conj_sum: f64 = (0..self.len())
            .map(|i| {
                let u = h[i] - self.r[i];
                match &self.model {
                    LossModel::Box { .. } => self.conj(i, u).value,
                    LossModel::F { .. } => {
                        if theta.eta_f > 0.0 {
                            theta.eta_f * self.conj(i, u / theta.eta_f).value
                        } else {
                            f64::INFINITY
                        }
                    }
                }
            })
            .sum();
        let gamma_term = match &self.model {
            LossModel::F { gamma, .. } => theta.eta_f * gamma,
            LossModel::Box { .. } => 0.0,
        };
        gamma_term - c.dot(&theta.eta) + conj_sum / n
    }

    /// Bound implied by a dual objective value.
    pub fn bound_from_objective(&self, objective: f64) -> f64 {
        -objective * self.direction.sign()
    }

    /// Signed primal objective `mean(w~ r)` in the caller's direction.
    pub fn primal_value(&self, weights: &DVector<f64>) -> f64 {
        weights.dot(&self.r) / self.len() as f64 * self.direction.sign()
    }

    /// `|| (Psi' w~) / n - c ||_2`.
    pub fn constraint_residual(&self, weights: &DVector<f64>) -> f64 {
        let n = self.len() as f64;
        (self.psi.tr_mul(weights) / n - self.c()).norm()
    }

    /// Restriction to a subset of columns.
    pub(crate) fn select_columns(&self, cols: &[usize]) -> Self {
        let target = match &self.target {
            Target::SampleMean => Target::SampleMean,
            Target::Fixed(c) => Target::Fixed(DVector::from_iterator(cols.len(), cols.iter().map(|&j| c[j]))),
        };
        Self {
            r: self.r.clone(),
            psi: self.psi.select_columns(cols),
            target,
            model: self.model.clone(),
            direction: self.direction,
        }
    }
}

/// Per-sample loss and subgradient interval for the public API: returns
/// `(value, lo, hi)` where `[lo, hi]` is the subdifferential of `f*`.
pub fn dual_loss(theta: &DualParams, i: usize, prob: &DualProblem) -> SampleLoss {
    prob.sample_loss(theta, i)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverStatus {
    Converged,
    MaxIterations,
    /// Nothing to optimise (flat objective) or a collapsed constraint set.
    Degenerate,
}

impl SolverStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolverStatus::Converged => "converged",
            SolverStatus::MaxIterations => "max-iterations",
            SolverStatus::Degenerate => "degenerate",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    pub params: DualParams,
    /// `L(theta)` at the returned parameters.
    pub objective: f64,
    pub status: SolverStatus,
    pub iterations: usize,
    /// Basis columns actually used after rank reduction.
    pub effective_dim: usize,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub irls_eps_start: f64,
    pub irls_eps_end: f64,
    pub irls_max_iter: usize,
    pub irls_rel_tol: f64,
    /// Relative tolerance for dropping dependent basis columns.
    pub rank_tol: f64,
    pub ridge: f64,
    pub simplex_max_pivots: Option<usize>,
    pub f_grad_tol: f64,
    pub f_max_iter: usize,
    pub armijo: f64,
    pub tv_eps_start: f64,
    pub tv_eps_end: f64,
    pub tie_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            irls_eps_start: 1e-1,
            irls_eps_end: 1e-6,
            irls_max_iter: 50,
            irls_rel_tol: 1e-9,
            rank_tol: 1e-9,
            ridge: 1e-8,
            simplex_max_pivots: None,
            f_grad_tol: 1e-7,
            f_max_iter: 500,
            armijo: 1e-4,
            tv_eps_start: 1e-1,
            tv_eps_end: 1e-6,
            tie_tol: 1e-9,
        }
    }
}

/// Dispatches to the box or f-divergence solver.
pub fn solve_dual(prob: &DualProblem, opts: &SolverOptions, warm: Option<&DualParams>) -> Result<DualSolution> {
    match prob.model {
        LossModel::Box { .. } => solve_box_dual(prob, opts, warm),
        LossModel::F { .. } => solve_f_dual(prob, opts, warm),
    }
}

/// Greedy column selection keeping columns that add rank, in their original
/// order (modified Gram-Schmidt, re-orthogonalised once).
pub(crate) fn independent_columns(psi: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..psi.ncols() {
        let col = psi.column(j).into_owned();
        let norm0 = col.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = col;
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v.axpy(-proj, q, 1.0);
            }
        }
        let nv = v.norm();
        if nv > rel_tol * norm0 {
            basis.push(v / nv);
            keep.push(j);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_problem(direction: Direction) -> DualProblem {
        let r = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let psi = DMatrix::from_row_slice(4, 2, &[1.0, 0.1, 1.0, -0.4, 1.0, 0.7, 1.0, 0.2]);
        let a = DVector::from_element(4, 0.5);
        let b = DVector::from_element(4, 2.0);
        DualProblem::new(r, psi, LossModel::Box { a, b }, direction).unwrap()
    }

    #[test]
    fn degenerate_box_loss_is_minus_r() {
        let r = DVector::from_vec(vec![1.0, 3.0]);
        let psi = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let one = DVector::from_element(2, 1.0);
        let p = DualProblem::new(r, psi, LossModel::Box { a: one.clone(), b: one }, Direction::Lower).unwrap();
        for eta in [-3.0, 0.0, 2.5] {
            let th = DualParams { eta_f: 0.0, eta: DVector::from_vec(vec![eta]) };
            assert!((p.sample_loss(&th, 0).value + 1.0).abs() < 1e-12);
            assert!((p.bound_from_objective(p.mean_loss(&th)) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kink_reports_interval() {
        let p = small_problem(Direction::Lower);
        let eta = DVector::from_vec(vec![1.0 - 0.1 * 2.0, 2.0]);
        let th = DualParams { eta_f: 0.0, eta };
        let s = p.sample_loss(&th, 0);
        assert!(s.arg.abs() < 1e-12);
        assert_eq!((s.slope_lo, s.slope_hi), (0.5, 2.0));
    }

    #[test]
    fn upper_negates_rewards() {
        let lo = small_problem(Direction::Lower);
        let up = small_problem(Direction::Upper);
        assert_eq!(lo.r(), &(-up.r()));
    }

    #[test]
    fn independent_columns_drops_duplicates() {
        let psi = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 1.0, 2.0, 1.0, 1.0, 2.0, 0.0]);
        assert_eq!(independent_columns(&psi, 1e-9), vec![0, 2]);
    }
}
