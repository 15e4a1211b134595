use nalgebra::{DMatrix, DVector};

use super::{DualParams, DualProblem, LossModel};

/// Primal weights `w~` recovered from dual parameters.
#[derive(Debug, Clone)]
pub struct PrimalWeights {
    pub weights: DVector<f64>,
    /// Samples sitting on a kink of `f*` that needed the least-squares repair.
    pub ties: usize,
}

/// Recovers `w~` from the conjugate subgradient at the dual solution.
///
/// Box path: `b` where `r < eta'psi`, `a` where `r > eta'psi`; samples within
/// `tie_tol` of the kink get weights in `[a, b]` chosen to minimise the
/// moment residual, closest to one among minimisers. f-path: `f*'(v)`.
pub fn recover_primal_weights(theta: &DualParams, prob: &DualProblem, tie_tol: f64) -> PrimalWeights {
    let n = prob.len();
    match prob.model() {
        LossModel::Box { a, b } => {
            let h = prob.psi() * &theta.eta;
            let mut w = DVector::zeros(n);
            let mut ties = Vec::new();
            for i in 0..n {
                let u = h[i] - prob.r()[i];
                if a[i] == b[i] {
                    w[i] = a[i];
                } else if u.abs() <= tie_tol {
                    ties.push(i);
                } else if u > 0.0 {
                    w[i] = b[i];
                } else {
                    w[i] = a[i];
                }
            }
            let count = ties.len();
            if !ties.is_empty() {
                repair_ties(prob, a, b, &mut w, ties);
            }
            PrimalWeights { weights: w, ties: count }
        }
        LossModel::F { divergence, .. } => {
            if theta.eta_f.is_infinite() {
                return PrimalWeights { weights: DVector::from_element(n, 1.0), ties: 0 };
            }
            let h = prob.psi() * &theta.eta;
            let w = DVector::from_iterator(
                n,
                (0..n).map(|i| {
                    let v = (h[i] - prob.r()[i]) / theta.eta_f;
                    let c = divergence.conjugate(v);
                    if c.lo.is_finite() {
                        c.lo
                    } else {
                        c.hi
                    }
                }),
            );
            PrimalWeights { weights: w, ties: 0 }
        }
    }
}

/// Bounded least squares on the tied samples: solve, clamp violators, repeat.
fn repair_ties(prob: &DualProblem, a: &DVector<f64>, b: &DVector<f64>, w: &mut DVector<f64>, ties: Vec<usize>) {
    let n = prob.len() as f64;
    let psi = prob.psi();
    let dim = prob.dim();
    let tied: std::collections::HashSet<usize> = ties.iter().copied().collect();
    let mut rhs = prob.c() * n;
    for i in 0..prob.len() {
        if !tied.contains(&i) {
            for k in 0..dim {
                rhs[k] -= psi[(i, k)] * w[i];
            }
        }
    }
    let mut free = ties;
    loop {
        if free.is_empty() {
            return;
        }
        let amat = DMatrix::from_fn(dim, free.len(), |k, j| psi[(free[j], k)]);
        // Minimum-norm deviation from w~ = 1.
        let ones = DVector::from_element(free.len(), 1.0);
        let target = &rhs - &amat * &ones;
        let svd = amat.svd(true, true);
        let smax = svd.singular_values.max();
        let delta = match svd.solve(&target, 1e-12 * smax.max(1e-300)) {
            Ok(d) => d,
            Err(_) => DVector::zeros(free.len()),
        };
        let x = ones + delta;
        let mut still_free = Vec::with_capacity(free.len());
        let mut clamped = false;
        for (j, &i) in free.iter().enumerate() {
            let xi = x[j];
            if xi < a[i] || xi > b[i] {
                let v = xi.clamp(a[i], b[i]);
                w[i] = v;
                for k in 0..dim {
                    rhs[k] -= psi[(i, k)] * v;
                }
                clamped = true;
            } else {
                w[i] = xi;
                still_free.push(i);
            }
        }
        if !clamped {
            return;
        }
        free = still_free;
    }
}
