#![allow(dead_code)]

use crisp_core::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Exhaustive vertex enumeration for
/// `min mean(w r)  s.t.  a <= w <= b,  mean(w psi_d) = c_d`.
/// Every vertex has all but `rank(psi)` coordinates at a bound, so we fix the
/// rest and solve the square system for the free ones. Dependent columns are
/// dropped, which assumes consistent targets. `None` when infeasible.
pub fn lp_vertex_min(r: &[f64], psi: &DMatrix<f64>, a: &[f64], b: &[f64], c: &[f64]) -> Option<f64> {
    let n = r.len();
    let cols = independent(psi);
    let m = cols.len();
    let psi = psi.select_columns(&cols);
    let rhs: Vec<f64> = cols.iter().map(|&j| c[j] * n as f64).collect();
    let mut best: Option<f64> = None;
    for free in subsets(n, m) {
        let sub = DMatrix::from_fn(m, m, |d, k| psi[(free[k], d)]);
        let lu = sub.clone().lu();
        if m > 0 && sub.determinant().abs() < 1e-12 {
            continue;
        }
        let fixed: Vec<usize> = (0..n).filter(|i| !free.contains(i)).collect();
        for mask in 0u32..(1u32 << fixed.len()) {
            let mut w = vec![0.0; n];
            for (k, &i) in fixed.iter().enumerate() {
                w[i] = if mask >> k & 1 == 1 { b[i] } else { a[i] };
            }
            if m > 0 {
                let mut res = DVector::from_iterator(m, rhs.iter().copied());
                for &i in &fixed {
                    for d in 0..m {
                        res[d] -= w[i] * psi[(i, d)];
                    }
                }
                let Some(sol) = lu.solve(&res) else { continue };
                let mut ok = true;
                for (k, &i) in free.iter().enumerate() {
                    if sol[k] < a[i] - 1e-10 || sol[k] > b[i] + 1e-10 {
                        ok = false;
                        break;
                    }
                    w[i] = sol[k].clamp(a[i], b[i]);
                }
                if !ok {
                    continue;
                }
            }
            let val = w.iter().zip(r).map(|(wi, ri)| wi * ri).sum::<f64>() / n as f64;
            if best.is_none_or(|v| val < v) {
                best = Some(val);
            }
        }
    }
    best
}

fn independent(psi: &DMatrix<f64>) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for j in 0..psi.ncols() {
        let mut trial = keep.clone();
        trial.push(j);
        let s = psi.select_columns(&trial);
        let sv = s.svd(false, false).singular_values;
        if sv.min() > 1e-9 * sv.max().max(1.0) {
            keep = trial;
        }
    }
    keep
}

fn subsets(n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(start: usize, n: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, m, cur, out);
            cur.pop();
        }
    }
    rec(0, n, m, &mut cur, &mut out);
    out
}

/// A small random logged dataset with propensities in `[0.1, 0.9]`.
pub fn small_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let y = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..3.0));
    let t = DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { rng.gen_range(0..2) as f64 });
    let x = DMatrix::from_fn(n, 5, |_, _| rng.gen_range(-1.0..1.0));
    let p = DVector::from_fn(n, |_, _| rng.gen_range(0.1..0.9));
    Dataset::new(y, t, x, Some(p), ActionKind::Binary).unwrap()
}

/// Constant column plus `extra` random columns.
pub fn random_basis(n: usize, extra: usize, seed: u64) -> ConstraintBasis {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e37);
    let psi = DMatrix::from_fn(n, 1 + extra, |_, j| if j == 0 { 1.0 } else { rng.gen_range(-1.0..1.0) });
    ConstraintBasis::from_matrix(psi, true, "random", None).unwrap()
}

pub fn rewards(d: &Dataset, policy: &Policy) -> Vec<f64> {
    let p = d.propensities().unwrap();
    (0..d.len()).map(|i| policy.prob(d.t()[i], &d.context(i)) / p[i] * d.y()[i]).collect()
}

pub fn tan_bounds(d: &Dataset, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let bm = BoxModel::tan(gamma);
    let p = d.propensities().unwrap();
    p.iter().map(|&pi| bm.bounds(pi).unwrap()).unzip()
}

pub fn col_means(psi: &DMatrix<f64>) -> Vec<f64> {
    psi.column_iter().map(|c| c.mean()).collect()
}

/// Binary synthetic data with a median-heuristic RBF KPCA basis.
pub fn kpca_for(d: &Dataset, dim: usize) -> ConstraintBasis {
    let bw = median_heuristic(&d.kernel_inputs()).unwrap();
    kpca_basis(&KernelSpec::rbf(bw).unwrap(), d, dim, &KpcaOptions::default()).unwrap()
}

pub fn arm_linear_for(d: &Dataset, truth: &SyntheticTruth, policy: &Policy) -> ConstraintBasis {
    let t = truth.clone();
    arm_linear_basis(policy, d, std::sync::Arc::new(move |a: f64, x: &[f64]| t.propensity(a, x))).unwrap()
}
