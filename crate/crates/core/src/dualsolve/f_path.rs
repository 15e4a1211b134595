//! Smooth path: quasi-Newton over `(ln eta_f, eta)`.

use nalgebra::{DMatrix, DVector};

use super::{DualParams, DualProblem, DualSolution, LossModel, SolverOptions, SolverStatus};
use crate::error::{CrispError, Result};
use crate::sensitivity::Divergence;
use crate::stats::logistic;

/// Smoothed total-variation conjugate: a softplus replaces the kink at
/// `-1/2` and a quadratic penalty replaces the wall at `1/2`. Returns the
/// value with its first and second derivatives.
pub fn tv_smoothed(v: f64, eps: f64) -> (f64, f64, f64) {
    let z = (v + 0.5) / eps;
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    let s = logistic(z);
    let over = (v - 0.5).max(0.0);
    let value = -0.5 + eps * softplus + over * over / (2.0 * eps);
    let d1 = s + over / eps;
    let d2 = s * (1.0 - s) / eps + if v > 0.5 { 1.0 / eps } else { 0.0 };
    (value, d1, d2)
}

#[derive(Clone, Copy)]
enum Conj {
    Exact(Divergence),
    SmoothTv(f64),
}

impl Conj {
    fn eval(self, v: f64) -> (f64, f64) {
        match self {
            Conj::Exact(d) => {
                let c = d.conjugate(v);
                if c.is_finite() && !c.is_empty() {
                    (c.value, c.lo)
                } else {
                    (f64::INFINITY, f64::NAN)
                }
            }
            Conj::SmoothTv(eps) => {
                let (f, d1, _) = tv_smoothed(v, eps);
                (f, d1)
            }
        }
    }
}

struct Objective<'a> {
    prob: &'a DualProblem,
    c: DVector<f64>,
    gamma: f64,
    conj: Conj,
}

impl Objective<'_> {
    /// Value and gradient at `z = (ln eta_f, eta)`; `None` outside the domain.
    fn eval(&self, z: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let dim = self.prob.dim();
        let ef = z[0].exp();
        if !(ef.is_finite() && ef > 0.0) {
            return None;
        }
        let eta = z.rows(1, dim).into_owned();
        let h = self.prob.psi() * &eta;
        let r = self.prob.r();
        let n = self.prob.len();
        let mut sum_f = 0.0;
        let mut sum_ef = 0.0;
        let mut slopes = DVector::zeros(n);
        for i in 0..n {
            let v = (h[i] - r[i]) / ef;
            let (fv, d1) = self.conj.eval(v);
            if !fv.is_finite() || !d1.is_finite() {
                return None;
            }
            sum_f += fv;
            sum_ef += fv - v * d1;
            slopes[i] = d1;
        }
        let nf = n as f64;
        let value = ef * self.gamma - self.c.dot(&eta) + ef * sum_f / nf;
        let mut grad = DVector::zeros(dim + 1);
        grad[0] = ef * (self.gamma + sum_ef / nf);
        let g_eta = self.prob.psi().tr_mul(&slopes) / nf - &self.c;
        grad.rows_mut(1, dim).copy_from(&g_eta);
        Some((value, grad))
    }
}

struct Bfgs {
    z: DVector<f64>,
    iterations: usize,
    converged: bool,
}

fn bfgs(obj: &Objective<'_>, z0: DVector<f64>, opts: &SolverOptions) -> Result<Bfgs> {
    let k = z0.len();
    let (mut f, mut g) = obj
        .eval(&z0)
        .ok_or_else(|| CrispError::Infeasible("starting point outside the conjugate domain".into()))?;
    let mut z = z0;
    let mut hinv = DMatrix::<f64>::identity(k, k);
    let mut first = true;
    for it in 0..opts.f_max_iter {
        if g.amax() <= opts.f_grad_tol {
            return Ok(Bfgs { z, iterations: it, converged: true });
        }
        let mut p = -(&hinv * &g);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(k, k);
            p = -g.clone();
            slope = g.dot(&p);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-20 {
            let zn = &z + &p * alpha;
            if let Some((fn_, gn)) = obj.eval(&zn) {
                if fn_ <= f + opts.armijo * alpha * slope {
                    accepted = Some((zn, fn_, gn));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((zn, fn_, gn)) = accepted else {
            // No further decrease is representable.
            return Ok(Bfgs { z, iterations: it, converged: g.amax() <= opts.f_grad_tol });
        };
        let s = &zn - &z;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                hinv *= sy / y.dot(&y);
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (H y s' + s y' H) + (rho^2 y'Hy + rho) s s'
            hinv -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        z = zn;
        f = fn_;
        g = gn;
    }
    let converged = g.amax() <= opts.f_grad_tol;
    Ok(Bfgs { z, iterations: opts.f_max_iter, converged })
}

/// Where `f*'(v) = 1`, i.e. the dual argument at which `w~ = 1`.
fn unit_slope_point(div: Divergence) -> f64 {
    match div {
        Divergence::Kl => 1.0,
        Divergence::ReverseKl => -1.0,
        _ => 0.0,
    }
}

/// Minimises the empirical f-divergence dual over `(eta_f, eta)`.
pub fn solve_f_dual(prob: &DualProblem, opts: &SolverOptions, warm: Option<&DualParams>) -> Result<DualSolution> {
    let (div, gamma) = match prob.model() {
        LossModel::F { divergence, gamma } => (*divergence, *gamma),
        LossModel::Box { .. } => return Err(CrispError::Unsupported("f solver needs an f-divergence model".into())),
    };
    let dim = prob.dim();
    let n = prob.len() as f64;
    let constant = prob.constant_column();

    if gamma == 0.0 && constant.is_some() {
        // Only w~ = 1 satisfies the budget; the dual optimum sits at eta_f = inf.
        let params = DualParams { eta_f: f64::INFINITY, eta: DVector::zeros(dim) };
        let objective = -prob.r().sum() / n;
        return Ok(DualSolution { params, objective, status: SolverStatus::Degenerate, iterations: 0, effective_dim: dim });
    }

    // Cold start: centre the constant on mean(r) and scale eta_f like the
    // small-gamma optimum sd(r) / sqrt(2 gamma).
    let r_mean = prob.r().mean();
    let r_sd = (prob.r().iter().map(|v| (v - r_mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut ef = match warm {
        Some(w) if w.eta_f.is_finite() && w.eta_f > 0.0 => w.eta_f,
        _ => (r_sd.max(1e-8) / (2.0 * gamma).sqrt()).clamp(1e-8, 1e12),
    };
    let mut eta = match warm {
        Some(w) if w.eta.len() == dim && w.eta.iter().all(|v| v.is_finite()) => w.eta.clone(),
        _ => {
            let mut e = DVector::zeros(dim);
            if let Some(k) = constant {
                e[k] = r_mean + ef * unit_slope_point(div);
            }
            e
        }
    };

    let exact = Objective { prob, c: prob.c(), gamma, conj: Conj::Exact(div) };
    let pack = |ef: f64, eta: &DVector<f64>| {
        let mut z = DVector::zeros(dim + 1);
        z[0] = ef.ln();
        z.rows_mut(1, dim).copy_from(eta);
        z
    };

    let stages: Vec<Conj> = if div == Divergence::TotalVariation {
        let mut v = Vec::new();
        let mut eps = opts.tv_eps_start;
        while eps > opts.tv_eps_end * (1.0 + 1e-9) {
            v.push(Conj::SmoothTv(eps));
            eps *= 0.1;
        }
        v.push(Conj::SmoothTv(opts.tv_eps_end));
        v
    } else {
        vec![Conj::Exact(div)]
    };

    // Feasible start for conjugates with a domain wall.
    if exact.eval(&pack(ef, &eta)).is_none() && div != Divergence::TotalVariation {
        if let Some(k) = constant {
            let h = prob.psi() * &eta;
            let worst = (0..prob.len()).map(|i| h[i] - prob.r()[i]).fold(f64::NEG_INFINITY, f64::max);
            eta[k] -= worst + ef;
        }
        let mut tries = 0;
        while exact.eval(&pack(ef, &eta)).is_none() && tries < 60 {
            ef *= 2.0;
            tries += 1;
        }
        if exact.eval(&pack(ef, &eta)).is_none() {
            return Err(CrispError::Infeasible(format!(
                "no feasible starting point for the {} dual; add a constant basis column",
                div.name()
            )));
        }
    }

    let mut z = pack(ef, &eta);
    let mut iterations = 0;
    let mut converged = false;
    for conj in stages {
        let obj = Objective { prob, c: prob.c(), gamma, conj };
        let res = bfgs(&obj, z, opts)?;
        z = res.z;
        iterations += res.iterations;
        converged = res.converged;
    }

    let mut ef = z[0].exp();
    let eta = z.rows(1, dim).into_owned();
    if div == Divergence::TotalVariation {
        let h = prob.psi() * &eta;
        let worst = (0..prob.len()).map(|i| h[i] - prob.r()[i]).fold(f64::NEG_INFINITY, f64::max);
        if worst > 0.0 {
            ef = ef.max(2.0 * worst * (1.0 + 1e-12));
        }
    }
    let params = DualParams { eta_f: ef, eta };
    let objective = prob.mean_loss(&params);
    if !objective.is_finite() {
        return Err(CrispError::Infeasible("f-divergence dual ended outside its domain".into()));
    }
    let status = if converged { SolverStatus::Converged } else { SolverStatus::MaxIterations };
    if !converged {
        log::warn!("{} dual did not reach the gradient tolerance", div.name());
    }
    Ok(DualSolution { params, objective, status, iterations, effective_dim: dim })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensitivity::Direction;

    #[test]
    fn smoothed_tv_tracks_exact() {
        for v in [-2.0, -0.7, -0.2, 0.0, 0.3, 0.49] {
            let exact = Divergence::TotalVariation.conjugate(v).value;
            let (s, _, _) = tv_smoothed(v, 1e-6);
            assert!((s - exact).abs() < 1e-5, "v={v}");
        }
        let h = 1e-6;
        for v in [-0.6, 0.0, 0.7] {
            let (_, d1, d2) = tv_smoothed(v, 0.1);
            let fd1 = (tv_smoothed(v + h, 0.1).0 - tv_smoothed(v - h, 0.1).0) / (2.0 * h);
            let fd2 = (tv_smoothed(v + h, 0.1).1 - tv_smoothed(v - h, 0.1).1) / (2.0 * h);
            assert!((d1 - fd1).abs() < 1e-6 && (d2 - fd2).abs() < 1e-5);
        }
    }

    #[test]
    fn kl_dual_is_below_mean() {
        let r = DVector::from_vec(vec![1.0, 2.0, 0.0, 4.0, -1.0, 3.0]);
        let psi = DMatrix::from_element(6, 1, 1.0);
        let prob = DualProblem::new(r, psi, LossModel::F { divergence: Divergence::Kl, gamma: 0.1 }, Direction::Lower).unwrap();
        let sol = solve_f_dual(&prob, &SolverOptions::default(), None).unwrap();
        assert_eq!(sol.status, SolverStatus::Converged);
        let bound = prob.bound_from_objective(sol.objective);
        assert!(bound < 1.5 && bound > -1.0);
    }
}
