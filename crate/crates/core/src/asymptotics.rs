//! Sandwich inference on the dual ERM: confidence intervals, the
//! information-criterion correction and k-fold cross validation.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::{ActionKind, Dataset};
use crate::dualsolve::{solve_dual, DualParams, DualProblem, LossModel, SolverOptions};
use crate::error::{invalid, CrispError, Result};
use crate::estimators::{kcmc_problem, kcmc_problem_with_psi, BoundReport};
use crate::kernels::ConstraintBasis;
use crate::policy::Policy;
use crate::sensitivity::{Direction, SensitivityModel};
use crate::stats::{normal_pdf, normal_quantile};

/// What the box-path conditional density KDE is centred on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityCentering {
    /// Neighbour outcomes `r_j`, evaluated at `eta'psi_i`.
    Outcome,
    /// Neighbour residuals `r_j - eta'psi_j`, evaluated at zero.
    Residual,
}

#[derive(Debug, Clone, Copy)]
pub struct SandwichOptions {
    pub centering: DensityCentering,
    /// Neighbourhood size of the conditional residual density estimate.
    pub knn: usize,
    /// Fixed KDE bandwidth; Silverman's rule within each window when `None`.
    pub bandwidth: Option<f64>,
    /// Leave samples the fit interpolates (zero residual) out of the KDE.
    pub skip_interpolated: bool,
    pub ridge: f64,
}

impl Default for SandwichOptions {
    fn default() -> Self {
        Self { centering: DensityCentering::Outcome, knn: 50, bandwidth: None, skip_interpolated: true, ridge: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct SandwichEstimates {
    pub v: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub loss_mean: f64,
    pub loss_var: f64,
    pub n: usize,
    pub condition_number: f64,
    /// A ridge was added to make `V` invertible.
    pub ridge_applied: bool,
    /// `V` vanished (e.g. `a = b` everywhere); the correction is zero.
    pub degenerate: bool,
}

impl SandwichEstimates {
    /// `tr(V^{-1} J)`.
    pub fn trace_term(&self) -> f64 {
        if self.degenerate || self.v.nrows() == 0 {
            return 0.0;
        }
        let solved = match self.v.clone().cholesky() {
            Some(ch) => ch.solve(&self.j),
            None => match self.v.clone().lu().solve(&self.j) {
                Some(s) => s,
                None => return 0.0,
            },
        };
        solved.trace()
    }
}

/// Per-sample subgradients at the solution, one row per sample.
fn score_matrix(prob: &DualProblem, theta: &DualParams, weights: &DVector<f64>) -> DMatrix<f64> {
    let k = if prob.is_box() { prob.dim() } else { prob.dim() + 1 };
    let mut g = DMatrix::zeros(prob.len(), k);
    for i in 0..prob.len() {
        let loss = prob.sample_loss(theta, i);
        let gi = prob.sample_subgradient(theta, i, &loss, weights[i]);
        g.set_row(i, &gi.transpose());
    }
    g
}

/// `mean_i psi_i psi_i' (b_i - a_i) density_i`.
pub fn box_hessian_population(psi: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>, density: &[f64]) -> DMatrix<f64> {
    let n = psi.nrows();
    let mut scaled = psi.clone();
    for i in 0..n {
        let s = (b[i] - a[i]) * density[i];
        scaled.row_mut(i).scale_mut(s);
    }
    psi.tr_mul(&scaled) / n as f64
}

/// Analytic Hessian of the mean f-path loss over `(eta_f, eta)`.
pub fn f_hessian(prob: &DualProblem, theta: &DualParams) -> Result<DMatrix<f64>> {
    let div = match prob.model() {
        LossModel::F { divergence, .. } => *divergence,
        LossModel::Box { .. } => return Err(CrispError::Unsupported("f_hessian needs an f-divergence problem".into())),
    };
    let ef = theta.eta_f;
    if !(ef > 0.0 && ef.is_finite()) {
        return Err(invalid("f_hessian needs a finite positive eta_f"));
    }
    let dim = prob.dim();
    let h = prob.psi() * &theta.eta;
    let mut z = DMatrix::zeros(prob.len(), dim + 1);
    for i in 0..prob.len() {
        let v = (h[i] - prob.r()[i]) / ef;
        let s = (div.conjugate_second(v) / ef).max(0.0);
        if !s.is_finite() {
            return Err(invalid("Hessian evaluated outside the conjugate domain"));
        }
        let sq = s.sqrt();
        z[(i, 0)] = -v * sq;
        for k in 0..dim {
            z[(i, k + 1)] = prob.psi()[(i, k)] * sq;
        }
    }
    Ok(z.tr_mul(&z) / prob.len() as f64)
}

/// Conditional density of `r` at `h_i = eta'psi_i` given `(t_i, x_i)`, from
/// a Gaussian KDE over the `knn` nearest samples in kernel-input space. The
/// bandwidth is Silverman's rule on the window's residuals `r_j - h_j`.
/// Samples with `|r_j - h_j| <= skip_below` are not used as KDE centres.
/// With `groups`, neighbours are drawn from the sample's own group only.
pub fn conditional_density(
    points: &DMatrix<f64>,
    groups: Option<&DVector<f64>>,
    r: &DVector<f64>,
    h: &DVector<f64>,
    opts: &SandwichOptions,
    skip_below: f64,
) -> Vec<f64> {
    let n = points.nrows();
    let resid = r - h;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| points.row(i).iter().copied().collect()).collect();
    let mut usable: Vec<usize> = (0..n).filter(|&j| resid[j].abs() > skip_below).collect();
    if usable.is_empty() {
        usable = (0..n).collect();
    }
    let mut out = vec![0.0; n];
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut window: Vec<f64> = Vec::with_capacity(opts.knn);
    for i in 0..n {
        dist.clear();
        for &j in &usable {
            if let Some(g) = groups {
                if g[j] != g[i] {
                    continue;
                }
            }
            let d2: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            dist.push((d2, j));
        }
        if dist.is_empty() {
            continue;
        }
        let k = opts.knn.clamp(1, dist.len());
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        let nbrs = &dist[..k];
        window.clear();
        window.extend(nbrs.iter().map(|&(_, j)| resid[j]));
        let bw = opts.bandwidth.unwrap_or_else(|| silverman(&mut window)).max(1e-12);
        let dens: f64 = match opts.centering {
            DensityCentering::Outcome => nbrs.iter().map(|&(_, j)| normal_pdf((r[j] - h[i]) / bw)).sum(),
            DensityCentering::Residual => nbrs.iter().map(|&(_, j)| normal_pdf(resid[j] / bw)).sum(),
        };
        out[i] = dens / (k as f64 * bw);
    }
    out
}

/// Silverman's rule of thumb `0.9 min(sd, IQR/1.34) m^{-1/5}`.
fn silverman(v: &mut [f64]) -> f64 {
    let m = v.len();
    if m < 2 {
        return 1.0;
    }
    let mean = v.iter().sum::<f64>() / m as f64;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (m - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (m as f64).powf(-0.2)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Sandwich quantities at the solution stored in `report`.
pub fn sandwich(d: &Dataset, report: &BoundReport, opts: &SandwichOptions) -> Result<SandwichEstimates> {
    let prob = &report.problem;
    if prob.len() != d.len() {
        return Err(CrispError::Dimension("report and dataset sizes differ".into()));
    }
    let theta = &report.dual;
    if !theta.eta_f.is_finite() {
        return Err(CrispError::Unsupported("sandwich is undefined at a collapsed f-constraint".into()));
    }
    let n = prob.len();
    let losses = prob.losses(theta);
    let loss_mean = losses.mean();
    let loss_var = if n > 1 { losses.iter().map(|l| (l - loss_mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    let scores = score_matrix(prob, theta, &report.weights);
    let j = symmetrize(scores.tr_mul(&scores) / n as f64);

    let mut v = match prob.model() {
        LossModel::Box { a, b } => {
            let h = prob.psi() * &theta.eta;
            let scale = prob.r().amax().max(1e-300);
            let skip = if opts.skip_interpolated { 1e-9 * scale } else { -1.0 };
            let groups = (d.action_kind() == ActionKind::Binary).then(|| d.t());
            let dens = conditional_density(&d.kernel_inputs(), groups, prob.r(), &h, opts, skip);
            box_hessian_population(prob.psi(), a, b, &dens)
        }
        LossModel::F { .. } => f_hessian(prob, theta)?,
    };
    v = symmetrize(v);
    let dim = v.nrows();
    let tr = v.trace();
    let degenerate = !(tr > 0.0);
    let mut ridge_applied = false;
    if !degenerate && v.clone().cholesky().is_none() {
        let ridge = opts.ridge * tr / dim as f64;
        for k in 0..dim {
            v[(k, k)] += ridge;
        }
        ridge_applied = true;
        log::warn!("sandwich Hessian is singular; added ridge {ridge:.3e}");
    }
    let condition_number = if degenerate {
        f64::INFINITY
    } else {
        let ev = v.clone().symmetric_eigen().eigenvalues;
        let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &e| (l.min(e), h.max(e.abs())));
        if lo > 0.0 {
            hi / lo
        } else {
            f64::INFINITY
        }
    };
    if degenerate {
        log::warn!("sandwich Hessian vanishes; second-order correction set to zero");
    }
    Ok(SandwichEstimates { v, j, loss_mean, loss_var, n, condition_number, ridge_applied, degenerate })
}

/// Normal-theory interval for the bound in `report`. The corrected version
/// shifts the centre by `tr(V^{-1}J)/(2n)` in the pessimistic direction.
pub fn confidence_interval(report: &BoundReport, s: &SandwichEstimates, alpha: f64, corrected: bool) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let z = normal_quantile(1.0 - alpha / 2.0);
    let half = if s.loss_var > 0.0 {
        z * (s.loss_var / s.n as f64).sqrt()
    } else {
        log::warn!("loss variance is zero; confidence interval has zero width");
        0.0
    };
    let centre = if corrected { gic(report, s) } else { report.value };
    Ok((centre - half, centre + half))
}

/// `value - tr(V^{-1}J)/(2n)` for lower bounds, mirrored for upper bounds.
pub fn gic(report: &BoundReport, s: &SandwichEstimates) -> f64 {
    let corr = s.trace_term() / (2.0 * s.n as f64);
    match report.direction {
        Direction::Lower => report.value - corr,
        Direction::Upper => report.value + corr,
    }
}

/// k-fold cross-validated bound: the basis and dual are fitted on the
/// training folds and the mean dual loss is taken on the held-out fold.
/// Folds smaller than the basis dimension are merged by lowering `k`.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate(
    d: &Dataset,
    policy: &Policy,
    model: &SensitivityModel,
    builder: &dyn Fn(&Dataset, usize) -> Result<ConstraintBasis>,
    dim: usize,
    k: usize,
    seed: u64,
    direction: Direction,
) -> Result<f64> {
    let n = d.len();
    if k < 2 {
        return Err(invalid("cross validation needs at least two folds"));
    }
    if k > n {
        return Err(invalid(format!("cannot split {n} samples into {k} folds")));
    }
    let mut folds = k;
    if n / folds < dim.max(1) {
        folds = (n / dim.max(1)).max(2);
        log::warn!("folds smaller than the basis dimension; merging down to {folds} folds");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let opts = SolverOptions::default();
    let mut total = 0.0;
    for f in 0..folds {
        let test_idx: Vec<usize> = order.iter().enumerate().filter(|(p, _)| p % folds == f).map(|(_, &i)| i).collect();
        let train_idx: Vec<usize> = order.iter().enumerate().filter(|(p, _)| p % folds != f).map(|(_, &i)| i).collect();
        let train = d.subset(&train_idx);
        let test = d.subset(&test_idx);
        let basis = builder(&train, dim)?;
        let prob = kcmc_problem(&train, policy, model, &basis, direction)?;
        let sol = solve_dual(&prob, &opts, None)?;
        let psi_test = basis.extend_dataset(&test)?;
        let held = kcmc_problem_with_psi(&test, policy, model, &psi_test, basis.includes_constant(), direction)?;
        total += held.losses(&sol.params).sum();
    }
    let mean_loss = total / n as f64;
    Ok(-mean_loss * direction.sign())
}
