//! Evaluation policies and max-min policy learning.

use nalgebra::DVector;

use crate::data::Dataset;
use crate::dualsolve::{DualParams, SolverOptions};
use crate::error::{invalid, CrispError, Result};
use crate::estimators::{kcmc_bound_with, zsb_bound_with, BoundReport};
use crate::kernels::ConstraintBasis;
use crate::sensitivity::{Direction, SensitivityModel};
use crate::stats::{logistic, normal_pdf_with};

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// `pi(T=1|x) = logistic(beta' x)`.
    Logistic { beta: Vec<f64> },
    /// `pi(t|x) = N(t; beta' x, variance)`.
    Gaussian { beta: Vec<f64>, variance: f64 },
    /// `sum_k weights_k pi_k(t|x)` with weights on the simplex.
    Mixed { weights: Vec<f64>, components: Vec<Policy> },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

impl Policy {
    /// Logistic evaluation policy used with the binary synthetic data.
    pub fn evaluation_logistic() -> Self {
        Policy::Logistic { beta: vec![1.0, 0.5, -0.5, 0.0, 0.0] }
    }

    /// Gaussian evaluation policy used with the continuous synthetic data.
    pub fn evaluation_gaussian() -> Self {
        Policy::Gaussian { beta: vec![1.0, 0.5, -0.5, 0.0, 0.0], variance: 0.25 }
    }

    pub fn mixed(weights: Vec<f64>, components: Vec<Policy>) -> Result<Self> {
        if weights.len() != components.len() || weights.is_empty() {
            return Err(invalid("mixed policy needs one weight per component"));
        }
        let s: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < -1e-12) || (s - 1.0).abs() > 1e-9 {
            return Err(invalid("mixed policy weights must lie on the simplex"));
        }
        Ok(Policy::Mixed { weights, components })
    }

    /// Probability mass (binary actions) or density (continuous actions).
    pub fn prob(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            Policy::Logistic { beta } => {
                let s = dot(beta, x);
                if t == 1.0 {
                    logistic(s)
                } else {
                    logistic(-s)
                }
            }
            Policy::Gaussian { beta, variance } => normal_pdf_with(t, dot(beta, x), *variance),
            Policy::Mixed { weights, components } => {
                weights.iter().zip(components).map(|(w, c)| w * c.prob(t, x)).sum()
            }
        }
    }

    /// Trainable parameters: `beta` for logistic and Gaussian policies, the
    /// mixture weights for mixed policies.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Policy::Logistic { beta } | Policy::Gaussian { beta, .. } => beta.clone(),
            Policy::Mixed { weights, .. } => weights.clone(),
        }
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.params().len() {
            return Err(invalid("parameter length mismatch"));
        }
        Ok(match self {
            Policy::Logistic { .. } => Policy::Logistic { beta: params.to_vec() },
            Policy::Gaussian { variance, .. } => Policy::Gaussian { beta: params.to_vec(), variance: *variance },
            Policy::Mixed { components, .. } => Policy::Mixed { weights: params.to_vec(), components: components.clone() },
        })
    }

    /// Gradient of `pi(t|x)` with respect to [`Policy::params`].
    pub fn grad_prob(&self, t: f64, x: &[f64]) -> Vec<f64> {
        match self {
            Policy::Logistic { beta } => {
                let s = logistic(dot(beta, x));
                let g = s * (1.0 - s) * if t == 1.0 { 1.0 } else { -1.0 };
                x.iter().map(|v| g * v).collect()
            }
            Policy::Gaussian { beta, variance } => {
                let m = dot(beta, x);
                let g = normal_pdf_with(t, m, *variance) * (t - m) / variance;
                x.iter().map(|v| g * v).collect()
            }
            Policy::Mixed { components, .. } => components.iter().map(|c| c.prob(t, x)).collect(),
        }
    }

    fn is_mixed(&self) -> bool {
        matches!(self, Policy::Mixed { .. })
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        css += uk;
        let t = (css - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Inner problem used while learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerEstimator {
    Kcmc,
    Zsb,
}

#[derive(Debug, Clone)]
pub struct LearnOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub inner: InnerEstimator,
    /// Halve the step until the training bound does not decrease.
    pub backtracking: bool,
    pub solver: SolverOptions,
}

impl Default for LearnOptions {
    fn default() -> Self {
        Self {
            steps: 100,
            learning_rate: 0.05,
            inner: InnerEstimator::Kcmc,
            backtracking: false,
            solver: SolverOptions::default(),
        }
    }
}

/// Held-out data on which every iterate is scored with the KCMC lower bound.
pub struct TestSet<'a> {
    pub data: &'a Dataset,
    pub basis: &'a ConstraintBasis,
}

#[derive(Debug, Clone)]
pub struct LearnStep {
    pub step: usize,
    pub params: Vec<f64>,
    pub train_bound: f64,
    pub test_bound: Option<f64>,
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct LearnResult {
    pub policy: Policy,
    pub trajectory: Vec<LearnStep>,
}

fn inner_bound(
    d: &Dataset,
    model: &SensitivityModel,
    basis: &ConstraintBasis,
    policy: &Policy,
    inner: InnerEstimator,
    solver: &SolverOptions,
    warm: Option<&DualParams>,
) -> Result<BoundReport> {
    match inner {
        InnerEstimator::Kcmc => kcmc_bound_with(d, policy, model, basis, Direction::Lower, solver, warm),
        InnerEstimator::Zsb => match model {
            SensitivityModel::Box(b) => zsb_bound_with(d, policy, b, Direction::Lower, solver),
            SensitivityModel::F(_) => Err(CrispError::Unsupported("ZSB needs a box model".into())),
        },
    }
}

/// Danskin gradient `mean(w~_i / p_i * grad pi(T_i|X_i) * Y_i)` at the inner optimum.
pub fn danskin_gradient(d: &Dataset, policy: &Policy, weights: &DVector<f64>) -> Result<Vec<f64>> {
    let p = d.propensities()?;
    let k = policy.params().len();
    let mut g = vec![0.0; k];
    for i in 0..d.len() {
        let x = d.context(i);
        let gp = policy.grad_prob(d.t()[i], &x);
        let c = weights[i] / p[i] * d.y()[i];
        for (gj, v) in g.iter_mut().zip(gp) {
            *gj += c * v;
        }
    }
    let n = d.len() as f64;
    Ok(g.into_iter().map(|v| v / n).collect())
}

/// Gradient ascent on the confounding-robust lower bound.
pub fn learn_policy_maxmin(
    d: &Dataset,
    model: &SensitivityModel,
    basis: &ConstraintBasis,
    p0: &Policy,
    opts: &LearnOptions,
    test: Option<TestSet<'_>>,
) -> Result<LearnResult> {
    if !(opts.learning_rate > 0.0) {
        return Err(invalid("learning rate must be positive"));
    }
    let score_test = |pol: &Policy| -> Result<Option<f64>> {
        match &test {
            Some(ts) => Ok(Some(kcmc_bound_with(ts.data, pol, model, ts.basis, Direction::Lower, &opts.solver, None)?.value)),
            None => Ok(None),
        }
    };

    let mut policy = p0.clone();
    let mut report = inner_bound(d, model, basis, &policy, opts.inner, &opts.solver, None)?;
    let mut trajectory = vec![LearnStep {
        step: 0,
        params: policy.params(),
        train_bound: report.value,
        test_bound: score_test(&policy)?,
        skipped: false,
    }];

    for step in 1..=opts.steps {
        let grad = danskin_gradient(d, &policy, &report.weights)?;
        let mut lr = opts.learning_rate;
        let mut accepted = None;
        for _ in 0..if opts.backtracking { 20 } else { 1 } {
            let params: Vec<f64> = policy.params().iter().zip(&grad).map(|(p, g)| p + lr * g).collect();
            let params = if policy.is_mixed() { project_simplex(&params) } else { params };
            let cand = policy.with_params(&params)?;
            match inner_bound(d, model, basis, &cand, opts.inner, &opts.solver, Some(&report.dual)) {
                Ok(r) => {
                    if !opts.backtracking || r.value >= report.value {
                        accepted = Some((cand, r));
                        break;
                    }
                }
                Err(e) => log::warn!("inner solve failed at step {step}: {e}"),
            }
            lr *= 0.5;
        }
        let skipped = accepted.is_none();
        if let Some((cand, r)) = accepted {
            policy = cand;
            report = r;
        }
        trajectory.push(LearnStep {
            step,
            params: policy.params(),
            train_bound: report.value,
            test_bound: score_test(&policy)?,
            skipped,
        });
    }
    Ok(LearnResult { policy, trajectory })
}
