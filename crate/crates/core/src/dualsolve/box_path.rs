//! Box path: the dual is a weighted quantile regression of `r` on `psi`.
//!
//! A Huber-smoothed IRLS pass gets close to the optimum; a bounded dual
//! simplex on the primal LP then finishes exactly, starting from the
//! samples the IRLS fit interpolates best.

use nalgebra::{DMatrix, DVector};

use super::{independent_columns, DualParams, DualProblem, DualSolution, LossModel, SolverOptions, SolverStatus};
use crate::error::{CrispError, Result};

/// Minimises the empirical box dual `L(eta)`.
pub fn solve_box_dual(prob: &DualProblem, opts: &SolverOptions, warm: Option<&DualParams>) -> Result<DualSolution> {
    let (a, b) = match prob.model() {
        LossModel::Box { a, b } => (a, b),
        LossModel::F { .. } => return Err(CrispError::Unsupported("box solver needs a box model".into())),
    };
    let dim = prob.dim();
    if dim == 0 || a.iter().zip(b.iter()).all(|(x, y)| x == y) {
        let params = DualParams::zeros(dim);
        let objective = prob.mean_loss(&params);
        return Ok(DualSolution { params, objective, status: SolverStatus::Degenerate, iterations: 0, effective_dim: 0 });
    }

    let cols = independent_columns(prob.psi(), opts.rank_tol);
    let reduced = if cols.len() < dim { prob.select_columns(&cols) } else { prob.clone() };
    let start = match warm {
        Some(w) if w.eta.len() == dim => DVector::from_iterator(cols.len(), cols.iter().map(|&j| w.eta[j])),
        _ => DVector::zeros(cols.len()),
    };

    let (eta_irls, irls_iter) = irls(&reduced, a, b, start, opts);
    let (eta_red, pivots, status) = dual_simplex(&reduced, a, b, &eta_irls, opts)?;

    let mut eta = DVector::zeros(dim);
    for (k, &j) in cols.iter().enumerate() {
        eta[j] = eta_red[k];
    }
    let params = DualParams { eta_f: 0.0, eta };
    let objective = prob.mean_loss(&params);
    Ok(DualSolution { params, objective, status, iterations: irls_iter + pivots, effective_dim: cols.len() })
}

/// IRLS on `-eta'c + mean(m_i u_i + c1_i |u_i|)` with `|u|` smoothed below
/// `eps`, annealed geometrically.
fn irls(
    prob: &DualProblem,
    a: &DVector<f64>,
    b: &DVector<f64>,
    mut eta: DVector<f64>,
    opts: &SolverOptions,
) -> (DVector<f64>, usize) {
    let n = prob.len();
    let dim = prob.dim();
    let psi = prob.psi();
    let r = prob.r();
    let nf = n as f64;
    let c1: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| 0.5 * (y - x)).collect();
    let m = DVector::from_iterator(n, a.iter().zip(b.iter()).map(|(x, y)| 0.5 * (x + y)));
    let base_rhs = prob.c() * nf - psi.tr_mul(&m);
    let scale = (r.iter().map(|v| v.abs()).sum::<f64>() / nf).max(1e-12);
    let eps_end = opts.irls_eps_end * scale;
    let mut eps = opts.irls_eps_start * scale;
    let anneal_steps = ((opts.irls_max_iter as f64) * 0.6).max(1.0);
    let ratio = (opts.irls_eps_end / opts.irls_eps_start).powf(1.0 / anneal_steps);

    let mut scaled = psi.clone();
    let mut wr = DVector::zeros(n);
    let mut iters = 0;
    for it in 0..opts.irls_max_iter {
        iters = it + 1;
        let h = psi * &eta;
        for i in 0..n {
            let u = h[i] - r[i];
            let w = c1[i] / u.abs().max(eps);
            let sw = w.sqrt();
            for j in 0..dim {
                scaled[(i, j)] = psi[(i, j)] * sw;
            }
            wr[i] = w * r[i];
        }
        let mut mat = scaled.tr_mul(&scaled);
        let tr = mat.trace() / dim as f64;
        let ridge = opts.ridge * if tr > 0.0 { tr } else { 1.0 };
        for j in 0..dim {
            mat[(j, j)] += ridge;
        }
        let rhs = psi.tr_mul(&wr) + &base_rhs;
        let next = match mat.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => match mat.lu().solve(&rhs) {
                Some(s) => s,
                None => break,
            },
        };
        if !next.iter().all(|v| v.is_finite()) {
            break;
        }
        let change = (&next - &eta).amax() / (1.0 + eta.amax());
        eta = next;
        let annealed = eps <= eps_end * (1.0 + 1e-12);
        eps = (eps * ratio).max(eps_end);
        if annealed && change <= opts.irls_rel_tol {
            break;
        }
    }
    (eta, iters)
}

const PIVOT_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 100;

struct Simplex<'a> {
    n: usize,
    dim: usize,
    rows: Vec<f64>,
    r: &'a DVector<f64>,
    lo: &'a DVector<f64>,
    hi: &'a DVector<f64>,
    rhs: DVector<f64>,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    at_upper: Vec<bool>,
    binv: DMatrix<f64>,
}

impl<'a> Simplex<'a> {
    fn row(&self, j: usize) -> &[f64] {
        &self.rows[j * self.dim..(j + 1) * self.dim]
    }

    fn dot_row(&self, j: usize, v: &DVector<f64>) -> f64 {
        self.row(j).iter().zip(v.iter()).map(|(x, y)| x * y).sum()
    }

    fn value(&self, j: usize) -> f64 {
        if self.at_upper[j] {
            self.hi[j]
        } else {
            self.lo[j]
        }
    }

    fn refactor(&mut self) -> Result<()> {
        let dim = self.dim;
        let bmat = DMatrix::from_fn(dim, dim, |i, k| self.row(self.basis[k])[i]);
        self.binv = bmat
            .lu()
            .try_inverse()
            .ok_or_else(|| CrispError::Infeasible("simplex basis became singular".into()))?;
        Ok(())
    }

    fn duals(&self) -> DVector<f64> {
        let rb = DVector::from_iterator(self.dim, self.basis.iter().map(|&j| self.r[j]));
        self.binv.tr_mul(&rb)
    }

    fn basic_values(&self) -> DVector<f64> {
        let mut s = self.rhs.clone();
        for j in 0..self.n {
            if !self.in_basis[j] {
                let xj = self.value(j);
                if xj != 0.0 {
                    for (k, v) in self.row(j).iter().enumerate() {
                        s[k] -= v * xj;
                    }
                }
            }
        }
        &self.binv * s
    }
}

/// Picks up to `dim` samples with the smallest `|r_j - psi_j'eta|` whose rows
/// are linearly independent, preferring non-fixed samples and well
/// conditioned choices.
fn initial_basis(sx: &Simplex<'_>, eta: &DVector<f64>) -> Option<Vec<usize>> {
    let mut order: Vec<(f64, usize)> = (0..sx.n).map(|j| ((sx.r[j] - sx.dot_row(j, eta)).abs(), j)).collect();
    order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut q: Vec<DVector<f64>> = Vec::with_capacity(sx.dim);
    let mut chosen = Vec::with_capacity(sx.dim);
    let mut used = vec![false; sx.n];
    for &(tol, allow_fixed) in &[(0.05, false), (1e-8, false), (1e-8, true)] {
        for &(_, j) in &order {
            if chosen.len() == sx.dim {
                break;
            }
            if used[j] || (!allow_fixed && sx.lo[j] == sx.hi[j]) {
                continue;
            }
            let mut v = DVector::from_row_slice(sx.row(j));
            let n0 = v.norm();
            if n0 == 0.0 {
                continue;
            }
            for _ in 0..2 {
                for e in &q {
                    let p = e.dot(&v);
                    v.axpy(-p, e, 1.0);
                }
            }
            let nv = v.norm();
            if nv > tol * n0 {
                q.push(v / nv);
                chosen.push(j);
                used[j] = true;
            }
        }
    }
    (chosen.len() == sx.dim).then_some(chosen)
}

/// Bounded dual simplex on `min r'x  s.t.  Psi'x = n c,  lo <= x <= hi`.
/// Returns the optimal duals `eta`.
#[allow(clippy::needless_range_loop)]
fn dual_simplex(
    prob: &DualProblem,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    eta_start: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<(DVector<f64>, usize, SolverStatus)> {
    let n = prob.len();
    let dim = prob.dim();
    let psi = prob.psi();
    let mut rows = vec![0.0; n * dim];
    for j in 0..n {
        for k in 0..dim {
            rows[j * dim + k] = psi[(j, k)];
        }
    }
    let mut sx = Simplex {
        n,
        dim,
        rows,
        r: prob.r(),
        lo,
        hi,
        rhs: prob.c() * n as f64,
        basis: Vec::new(),
        in_basis: vec![false; n],
        at_upper: vec![false; n],
        binv: DMatrix::identity(dim, dim),
    };
    sx.basis = initial_basis(&sx, eta_start)
        .ok_or_else(|| CrispError::Infeasible("basis rows do not span the constraint space".into()))?;
    for &j in &sx.basis {
        sx.in_basis[j] = true;
    }
    sx.refactor()?;

    let bound_scale = 1.0 + lo.iter().chain(hi.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let feas_tol = 1e-9 * bound_scale;
    let r_scale = 1.0 + sx.r.amax();
    let dual_tol = 1e-13 * r_scale;
    let harris = 1e-12 * r_scale;
    let max_pivots = opts.simplex_max_pivots.unwrap_or(20 * (n + dim) + 1000);

    // Initial bound assignment from the starting duals.
    let y0 = sx.duals();
    for j in 0..n {
        if !sx.in_basis[j] {
            sx.at_upper[j] = sx.r[j] - sx.dot_row(j, &y0) < 0.0;
        }
    }

    let mut since_refactor = 0;
    for pivots in 0..max_pivots {
        let y = sx.duals();
        let d: Vec<f64> = (0..n).map(|j| sx.r[j] - sx.dot_row(j, &y)).collect();
        for j in 0..n {
            if !sx.in_basis[j] {
                if d[j] > dual_tol {
                    sx.at_upper[j] = false;
                } else if d[j] < -dual_tol {
                    sx.at_upper[j] = true;
                }
            }
        }
        let xb = sx.basic_values();

        let mut leave = None;
        let mut worst = feas_tol;
        for (k, &j) in sx.basis.iter().enumerate() {
            let inf = (sx.lo[j] - xb[k]).max(xb[k] - sx.hi[j]);
            if inf > worst {
                worst = inf;
                leave = Some(k);
            }
        }
        let Some(p) = leave else {
            return Ok((y, pivots, SolverStatus::Converged));
        };
        let below = xb[p] < sx.lo[sx.basis[p]];
        let rho = sx.binv.row(p).transpose();

        // Harris two-pass ratio test.
        let mut cands: Vec<(usize, f64, f64)> = Vec::new();
        let mut t_max = f64::INFINITY;
        for j in 0..n {
            if sx.in_basis[j] || sx.lo[j] == sx.hi[j] {
                continue;
            }
            let alpha = sx.dot_row(j, &rho);
            let eligible = if below {
                (!sx.at_upper[j] && alpha < -PIVOT_TOL) || (sx.at_upper[j] && alpha > PIVOT_TOL)
            } else {
                (!sx.at_upper[j] && alpha > PIVOT_TOL) || (sx.at_upper[j] && alpha < -PIVOT_TOL)
            };
            if eligible {
                let aa = alpha.abs();
                t_max = t_max.min((d[j].abs() + harris) / aa);
                cands.push((j, d[j].abs() / aa, aa));
            }
        }
        if cands.is_empty() {
            return Err(CrispError::Infeasible("moment constraints cannot be met inside the box".into()));
        }
        let (q, _, _) = cands
            .iter()
            .filter(|c| c.1 <= t_max)
            .fold(None::<(usize, f64, f64)>, |best, &c| match best {
                Some(bb) if bb.2 >= c.2 => Some(bb),
                _ => Some(c),
            })
            .expect("at least one candidate satisfies the Harris bound");

        let leaving = sx.basis[p];
        let col = DVector::from_row_slice(sx.row(q));
        let alpha_q = &sx.binv * col;
        let piv = alpha_q[p];
        sx.in_basis[leaving] = false;
        sx.at_upper[leaving] = !below;
        sx.in_basis[q] = true;
        sx.basis[p] = q;
        since_refactor += 1;
        if piv.abs() < 1e-11 || since_refactor >= REFACTOR_EVERY {
            sx.refactor()?;
            since_refactor = 0;
        } else {
            let row_p = sx.binv.row(p) / piv;
            for i in 0..dim {
                if i != p {
                    let f = alpha_q[i];
                    if f != 0.0 {
                        for k in 0..dim {
                            sx.binv[(i, k)] -= f * row_p[k];
                        }
                    }
                }
            }
            sx.binv.set_row(p, &row_p);
        }
    }
    log::warn!("dual simplex stopped after {max_pivots} pivots");
    Ok((sx.duals(), max_pivots, SolverStatus::MaxIterations))
}
