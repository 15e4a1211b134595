//! Kernels on joint `(t, x)` inputs and the constraint bases built from them.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::{kernel_point, ActionKind, Dataset};
use crate::error::{invalid, CrispError, Result};
use crate::policy::Policy;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    GaussianRbf { bandwidth: f64 },
    Linear,
    /// `(z . z' + 1)^degree`
    Polynomial { degree: u32 },
}

impl KernelSpec {
    pub fn rbf(bandwidth: f64) -> Result<Self> {
        let k = KernelSpec::GaussianRbf { bandwidth };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::GaussianRbf { bandwidth } if !(bandwidth > 0.0 && bandwidth.is_finite()) => {
                Err(invalid(format!("rbf bandwidth must be positive, got {bandwidth}")))
            }
            KernelSpec::Polynomial { degree: 0 } => Err(invalid("polynomial degree must be >= 1")),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            KernelSpec::GaussianRbf { bandwidth } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-d2 / (2.0 * bandwidth * bandwidth)).exp()
            }
            KernelSpec::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            KernelSpec::Polynomial { degree } => {
                let s: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                (s + 1.0).powi(degree as i32)
            }
        }
    }
}

fn rows(points: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..points.nrows()).map(|i| points.row(i).iter().copied().collect()).collect()
}

fn check_finite(points: &DMatrix<f64>) -> Result<()> {
    if points.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(invalid("kernel inputs contain non-finite values"))
    }
}

/// `K_ij = k(z_i, z_j)`, filled from the lower triangle so it is exactly symmetric.
pub fn gram_matrix(k: &KernelSpec, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    k.validate()?;
    check_finite(points)?;
    let z = rows(points);
    let n = z.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = k.eval(&z[i], &z[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

fn cross_gram(k: &KernelSpec, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| k.eval(&a[i], &b[j]))
}

const MEDIAN_SUBSAMPLE: usize = 2000;
const BANDWIDTH_FLOOR: f64 = 1e-12;

/// Median pairwise Euclidean distance, on a deterministic subsample of 2000
/// rows for larger inputs.
pub fn median_heuristic(points: &DMatrix<f64>) -> Result<f64> {
    let n = points.nrows();
    if n < 2 {
        return Err(invalid("median heuristic needs at least two points"));
    }
    check_finite(points)?;
    let z = rows(points);
    let idx: Vec<usize> = if n > MEDIAN_SUBSAMPLE {
        let mut rng = ChaCha20Rng::seed_from_u64(0x6d65_6469_616e);
        let mut v = sample(&mut rng, n, MEDIAN_SUBSAMPLE).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n).collect()
    };
    let mut dists = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            let d2: f64 = z[i].iter().zip(&z[j]).map(|(x, y)| (x - y) * (x - y)).sum();
            dists.push(d2.sqrt());
        }
    }
    let m = dists.len();
    let med = if m % 2 == 1 {
        *dists.select_nth_unstable_by(m / 2, f64::total_cmp).1
    } else {
        let hi = *dists.select_nth_unstable_by(m / 2, f64::total_cmp).1;
        let lo = dists[..m / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    };
    Ok(med.max(BANDWIDTH_FLOOR))
}

type ExtendFn = dyn Fn(f64, &[f64]) -> Result<Vec<f64>> + Send + Sync;

/// Orthogonal functions `psi_d(t, x)` evaluated on data, with an
/// out-of-sample extension.
#[derive(Clone)]
pub struct ConstraintBasis {
    psi: DMatrix<f64>,
    eigvals: Option<Vec<f64>>,
    includes_constant: bool,
    label: String,
    extend: Option<Arc<ExtendFn>>,
}

impl fmt::Debug for ConstraintBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintBasis")
            .field("label", &self.label)
            .field("n", &self.psi.nrows())
            .field("dim", &self.psi.ncols())
            .field("includes_constant", &self.includes_constant)
            .finish()
    }
}

impl ConstraintBasis {
    /// Basis from explicit columns; `extend` maps `(t, x)` to a row.
    pub fn from_matrix(
        psi: DMatrix<f64>,
        includes_constant: bool,
        label: impl Into<String>,
        extend: Option<Arc<ExtendFn>>,
    ) -> Result<Self> {
        if !psi.iter().all(|v| v.is_finite()) {
            return Err(invalid("basis columns must be finite"));
        }
        Ok(Self { psi, eigvals: None, includes_constant, label: label.into(), extend })
    }

    /// Constant function only.
    pub fn constant(n: usize) -> Self {
        Self {
            psi: DMatrix::from_element(n, 1, 1.0),
            eigvals: None,
            includes_constant: true,
            label: "constant".into(),
            extend: Some(Arc::new(|_, _| Ok(vec![1.0]))),
        }
    }

    /// One indicator per sample (`D = n`). No extension.
    pub fn indicators(n: usize) -> Self {
        Self {
            psi: DMatrix::identity(n, n),
            eigvals: None,
            includes_constant: false,
            label: "indicators".into(),
            extend: None,
        }
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn dim(&self) -> usize {
        self.psi.ncols()
    }

    pub fn len(&self) -> usize {
        self.psi.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.nrows() == 0
    }

    pub fn eigvals(&self) -> Option<&[f64]> {
        self.eigvals.as_deref()
    }

    pub fn includes_constant(&self) -> bool {
        self.includes_constant
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// True when some column is identically zero.
    pub fn is_degenerate(&self) -> bool {
        self.psi.column_iter().any(|c| c.iter().all(|v| *v == 0.0)) || self.dim() == 0
    }

    /// `psi(t, x)` for a new point.
    pub fn extend(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        match &self.extend {
            Some(f) => f(t, x),
            None => Err(CrispError::Unsupported(format!("basis `{}` has no out-of-sample extension", self.label))),
        }
    }

    /// Rows of `psi` for every sample of `d`.
    pub fn extend_dataset(&self, d: &Dataset) -> Result<DMatrix<f64>> {
        let dim = self.dim();
        let mut out = DMatrix::zeros(d.len(), dim);
        for i in 0..d.len() {
            let row = self.extend(d.t()[i], &d.context(i))?;
            if row.len() != dim {
                return Err(CrispError::Dimension(format!("extension returned {} values, expected {dim}", row.len())));
            }
            for (j, v) in row.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }

    /// The same fitted functions evaluated on another dataset.
    pub fn rebase(&self, d: &Dataset) -> Result<Self> {
        Ok(Self { psi: self.extend_dataset(d)?, ..self.clone() })
    }

    /// First `k` columns (the constant, when present, counts as one).
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k > self.dim() {
            return Err(invalid(format!("prefix {k} exceeds basis dimension {}", self.dim())));
        }
        let psi = self.psi.columns(0, k).into_owned();
        let includes_constant = self.includes_constant && k >= 1;
        let skip = usize::from(self.includes_constant);
        let eigvals = self.eigvals.as_ref().map(|e| e[..k.saturating_sub(skip).min(e.len())].to_vec());
        let extend = self.extend.clone().map(|f| {
            let g: Arc<ExtendFn> = Arc::new(move |t: f64, x: &[f64]| {
                let mut v = f(t, x)?;
                v.truncate(k);
                Ok(v)
            });
            g
        });
        Ok(Self { psi, eigvals, includes_constant, label: format!("{}[..{k}]", self.label), extend })
    }

    /// Columns `psi * m` (one new column per column of `m`), optionally with
    /// a leading constant.
    pub fn combine(&self, m: &DMatrix<f64>, with_constant: bool, label: impl Into<String>) -> Result<Self> {
        if m.nrows() != self.dim() {
            return Err(CrispError::Dimension(format!("combination has {} rows, basis has {} columns", m.nrows(), self.dim())));
        }
        let mixed = &self.psi * m;
        let psi = if with_constant { prepend_constant(&mixed) } else { mixed };
        let extend = self.extend.clone().map(|f| {
            let m = m.clone();
            let g: Arc<ExtendFn> = Arc::new(move |t: f64, x: &[f64]| {
                let row = DVector::from_vec(f(t, x)?);
                let mut v: Vec<f64> = if with_constant { vec![1.0] } else { Vec::new() };
                v.extend(m.tr_mul(&row).iter());
                Ok(v)
            });
            g
        });
        Self::from_matrix(psi, with_constant, label, extend)
    }
}

fn prepend_constant(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().insert_column(0, 1.0)
}

/// Options for [`kpca_basis`].
#[derive(Debug, Clone, Copy)]
pub struct KpcaOptions {
    pub include_constant: bool,
    /// Use Nystrom landmarks above this sample size.
    pub nystrom_threshold: usize,
    pub landmarks: usize,
    pub seed: u64,
}

impl Default for KpcaOptions {
    fn default() -> Self {
        Self { include_constant: true, nystrom_threshold: 4000, landmarks: 2000, seed: 0 }
    }
}

const EIG_RELATIVE_FLOOR: f64 = 1e-10;

/// Symmetric eigendecomposition, eigenvalues in non-increasing order.
pub(crate) fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let fm = faer::Mat::<f64>::from_fn(n, n, |i, j| m[(i, j)]);
    let eig = fm.selfadjoint_eigendecomposition(faer::Side::Lower);
    let s = eig.s().column_vector();
    let u = eig.u();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s.read(b).total_cmp(&s.read(a)));
    let vals = order.iter().map(|&k| s.read(k)).collect();
    let vecs = DMatrix::from_fn(n, n, |i, j| u.read(i, order[j]));
    (vals, vecs)
}

/// Kernel PCA basis on the joint `(t, x)` inputs of `d`. Columns have unit
/// empirical second moment and are ordered by eigenvalue; a constant column
/// is prepended when requested. Components whose eigenvalue falls below
/// `1e-10` of the leading one are dropped.
pub fn kpca_basis(k: &KernelSpec, d: &Dataset, dim: usize, opts: &KpcaOptions) -> Result<ConstraintBasis> {
    let n = d.len();
    if dim < 1 || dim > n {
        return Err(invalid(format!("KPCA dimension must lie in [1, {n}], got {dim}")));
    }
    k.validate()?;
    let z = d.kernel_inputs();
    check_finite(&z)?;
    let kind = d.action_kind();
    if n > opts.nystrom_threshold {
        return nystrom_basis(k, &z, kind, dim, opts);
    }

    let g = gram_matrix(k, &z)?;
    let col_mean: Vec<f64> = (0..n).map(|j| g.column(j).mean()).collect();
    let grand = col_mean.iter().sum::<f64>() / n as f64;
    let centered = DMatrix::from_fn(n, n, |i, j| g[(i, j)] - col_mean[i] - col_mean[j] + grand);
    let (vals, vecs) = sym_eigen_desc(&centered);
    let lead = vals[0].max(0.0);
    let kept = vals.iter().take(dim).take_while(|&&l| lead > 0.0 && l > EIG_RELATIVE_FLOOR * lead).count();
    if kept < dim {
        log::warn!("KPCA basis truncated from {dim} to {kept} components (eigenvalue floor)");
    }
    let sqrt_n = (n as f64).sqrt();
    let mut psi = DMatrix::zeros(n, kept);
    for c in 0..kept {
        for i in 0..n {
            psi[(i, c)] = sqrt_n * vecs[(i, c)];
        }
    }
    // Coefficients of the extension: sqrt(n) u_d / lambda_d.
    let coef = DMatrix::from_fn(n, kept, |i, c| sqrt_n * vecs[(i, c)] / vals[c]);
    let train = rows(&z);
    let kk = *k;
    let include_constant = opts.include_constant;
    let extend: Arc<ExtendFn> = Arc::new(move |t: f64, x: &[f64]| {
        let zp = kernel_point(kind, t, x);
        let kv: Vec<f64> = train.iter().map(|zj| kk.eval(&zp, zj)).collect();
        let row_mean = kv.iter().sum::<f64>() / kv.len() as f64;
        let kc = DVector::from_iterator(kv.len(), kv.iter().zip(&col_mean).map(|(v, cm)| v - row_mean - cm + grand));
        let mut out: Vec<f64> = if include_constant { vec![1.0] } else { Vec::new() };
        out.extend(coef.tr_mul(&kc).iter());
        Ok(out)
    });
    let psi = if opts.include_constant { prepend_constant(&psi) } else { psi };
    Ok(ConstraintBasis {
        psi,
        eigvals: Some(vals[..kept].to_vec()),
        includes_constant: opts.include_constant,
        label: format!("kpca({kept})"),
        extend: Some(extend),
    })
}

fn nystrom_basis(
    k: &KernelSpec,
    z: &DMatrix<f64>,
    kind: ActionKind,
    dim: usize,
    opts: &KpcaOptions,
) -> Result<ConstraintBasis> {
    let n = z.nrows();
    let m = opts.landmarks.min(n);
    let all = rows(z);
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut idx = sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    let landmarks: Vec<Vec<f64>> = idx.iter().map(|&i| all[i].clone()).collect();

    // Landmark feature map phi(z) = k(z, L) U r^{-1/2}, truncated to the
    // leading components that can resolve `dim` principal directions.
    let kmm = cross_gram(k, &landmarks, &landmarks);
    let (lvals, lvecs) = sym_eigen_desc(&kmm);
    let lead = lvals[0].max(0.0);
    let positive = lvals.iter().take_while(|&&l| lead > 0.0 && l > EIG_RELATIVE_FLOOR * lead).count();
    let r = positive.min((4 * dim).max(200));
    let proj = DMatrix::from_fn(m, r, |i, c| lvecs[(i, c)] / lvals[c].sqrt());
    let knm = cross_gram(k, &all, &landmarks);
    let phi = &knm * &proj;
    let mean = DVector::from_iterator(r, (0..r).map(|c| phi.column(c).mean()));
    let mut centered = phi;
    for c in 0..r {
        let mu = mean[c];
        centered.column_mut(c).add_scalar_mut(-mu);
    }
    let cov = centered.tr_mul(&centered) / n as f64;
    let (vals, vecs) = sym_eigen_desc(&cov);
    let lead = vals[0].max(0.0);
    let kept = vals.iter().take(dim).take_while(|&&l| lead > 0.0 && l > EIG_RELATIVE_FLOOR * lead).count();
    if kept < dim {
        log::warn!("Nystrom KPCA basis truncated from {dim} to {kept} components");
    }
    let rot = DMatrix::from_fn(r, kept, |i, c| vecs[(i, c)] / vals[c].sqrt());
    let psi = &centered * &rot;
    let map = &proj * &rot;
    let shift = rot.tr_mul(&mean);
    let kk = *k;
    let include_constant = opts.include_constant;
    let extend: Arc<ExtendFn> = Arc::new(move |t: f64, x: &[f64]| {
        let zp = kernel_point(kind, t, x);
        let kv = DVector::from_iterator(landmarks.len(), landmarks.iter().map(|l| kk.eval(&zp, l)));
        let mut out: Vec<f64> = if include_constant { vec![1.0] } else { Vec::new() };
        out.extend((map.tr_mul(&kv) - &shift).iter());
        Ok(out)
    });
    let psi = if opts.include_constant { prepend_constant(&psi) } else { psi };
    Ok(ConstraintBasis {
        psi,
        eigvals: Some(vals[..kept].iter().map(|v| v * n as f64).collect()),
        includes_constant: opts.include_constant,
        label: format!("nystrom-kpca({kept})"),
        extend: Some(extend),
    })
}

type QuantileFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;
type PropensityFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// One-column basis `psi_1(t, x) = (pi(t|x) / p_obs(t|x)) * qhat(t, x)`.
/// `propensity` evaluates `p_obs` for out-of-sample points.
pub fn quantile_feature_basis(
    policy: &Policy,
    d: &Dataset,
    qhat: Arc<QuantileFn>,
    propensity: Arc<PropensityFn>,
) -> Result<ConstraintBasis> {
    let p = d.propensities()?;
    let n = d.len();
    let mut psi = DMatrix::zeros(n, 1);
    for i in 0..n {
        let x = d.context(i);
        let q = qhat(d.t()[i], &x);
        if !q.is_finite() {
            return Err(invalid(format!("quantile function is not finite at sample {i}")));
        }
        psi[(i, 0)] = policy.prob(d.t()[i], &x) / p[i] * q;
    }
    let pol = policy.clone();
    let extend: Arc<ExtendFn> = Arc::new(move |t: f64, x: &[f64]| {
        let po = propensity(t, x);
        if !(po > 0.0) {
            return Err(invalid("propensity must be positive"));
        }
        Ok(vec![pol.prob(t, x) / po * qhat(t, x)])
    });
    let basis = ConstraintBasis::from_matrix(psi, false, "quantile-feature", Some(extend))?;
    if basis.is_degenerate() {
        log::warn!("quantile feature basis is identically zero");
    }
    Ok(basis)
}

fn arm_linear_row(kind: ActionKind, t: f64, x: &[f64], scale: f64) -> Vec<f64> {
    let k = x.len();
    let mut row = vec![0.0; 1 + 2 * (k + 1)];
    row[0] = 1.0;
    match kind {
        ActionKind::Binary => {
            let off = if t == 1.0 { 2 + k } else { 1 };
            row[off] = scale;
            for j in 0..k {
                row[off + 1 + j] = scale * x[j];
            }
        }
        ActionKind::Continuous => {
            row[1] = scale;
            row[2 + k] = scale * t;
            for j in 0..k {
                row[2 + j] = scale * x[j];
                row[3 + k + j] = scale * t * x[j];
            }
        }
    }
    row
}

/// Linear features in the context, scaled by `pi(t|x) / p_obs(t|x)`, with a
/// leading constant. Binary actions get one block `(1, x)` per action;
/// continuous actions get `(1, x, t, t x)`. Passing these columns to
/// [`crate::estimators::qb_bound`] makes stage one an ordinary per-action
/// linear quantile regression.
pub fn arm_linear_basis(policy: &Policy, d: &Dataset, propensity: Arc<PropensityFn>) -> Result<ConstraintBasis> {
    let p = d.propensities()?;
    let kind = d.action_kind();
    let n = d.len();
    let width = 1 + 2 * (d.context_dim() + 1);
    let mut psi = DMatrix::zeros(n, width);
    for i in 0..n {
        let x = d.context(i);
        let t = d.t()[i];
        let row = arm_linear_row(kind, t, &x, policy.prob(t, &x) / p[i]);
        for (j, v) in row.into_iter().enumerate() {
            psi[(i, j)] = v;
        }
    }
    let pol = policy.clone();
    let extend: Arc<ExtendFn> = Arc::new(move |t: f64, x: &[f64]| {
        let po = propensity(t, x);
        if !(po > 0.0) {
            return Err(invalid("propensity must be positive"));
        }
        Ok(arm_linear_row(kind, t, x, pol.prob(t, x) / po))
    });
    ConstraintBasis::from_matrix(psi, true, "arm-linear", Some(extend))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_binary_synthetic;

    fn pts(v: &[f64], cols: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(v.len() / cols, cols, v)
    }

    #[test]
    fn rbf_gram_diagonal_and_offdiagonal() {
        let z = pts(&[0.0, 0.0, 3.0, 4.0], 2);
        let g = gram_matrix(&KernelSpec::rbf(2.0).unwrap(), &z).unwrap();
        assert_eq!(g[(0, 0)], 1.0);
        assert_eq!(g[(1, 1)], 1.0);
        assert!((g[(0, 1)] - (-25.0f64 / 8.0).exp()).abs() < 1e-15);
        assert_eq!(g, g.transpose());
    }

    #[test]
    fn gram_rejects_nan() {
        let z = pts(&[0.0, f64::NAN], 1);
        assert!(gram_matrix(&KernelSpec::Linear, &z).is_err());
        assert!(KernelSpec::rbf(0.0).is_err());
        assert!(KernelSpec::Polynomial { degree: 0 }.validate().is_err());
    }

    #[test]
    fn median_heuristic_cases() {
        assert!((median_heuristic(&pts(&[0.0, 0.0, 3.0, 0.0], 2)).unwrap() - 3.0).abs() < 1e-15);
        assert_eq!(median_heuristic(&pts(&[1.0, 1.0, 1.0], 1)).unwrap(), 1e-12);
        assert_eq!(median_heuristic(&pts(&[0.0, 1.0, 2.0], 1)).unwrap(), 1.0);
        assert!(median_heuristic(&pts(&[0.0], 1)).is_err());
    }

    #[test]
    fn kpca_columns_orthonormal_and_extend_matches() {
        let (d, _) = generate_binary_synthetic(150, 5).unwrap();
        let bw = median_heuristic(&d.kernel_inputs()).unwrap();
        let b = kpca_basis(&KernelSpec::rbf(bw).unwrap(), &d, 10, &KpcaOptions::default()).unwrap();
        assert_eq!(b.dim(), 11);
        let gram = b.psi().tr_mul(b.psi()) / d.len() as f64;
        assert!((gram - DMatrix::identity(11, 11)).amax() < 1e-6);
        let ev = b.eigvals().unwrap();
        assert!(ev.windows(2).all(|w| w[0] >= w[1]));
        for i in [0, 17, 149] {
            let row = b.extend(d.t()[i], &d.context(i)).unwrap();
            for (j, v) in row.iter().enumerate() {
                assert!((v - b.psi()[(i, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn kpca_linear_one_dimensional() {
        let x = DMatrix::from_column_slice(5, 1, &[-2.0, -1.0, 0.0, 1.0, 2.0]);
        let d = Dataset::new(
            DVector::zeros(5),
            DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0]),
            x,
            None,
            ActionKind::Binary,
        )
        .unwrap();
        let opts = KpcaOptions { include_constant: false, ..Default::default() };
        let b = kpca_basis(&KernelSpec::Linear, &d, 1, &opts).unwrap();
        let c = b.psi().column(0);
        let scale = c[4] / 2.0;
        for (i, xv) in [-2.0, -1.0, 0.0, 1.0, 2.0].iter().enumerate() {
            assert!((c[i] - scale * xv).abs() < 1e-10);
        }
        assert!((c.norm_squared() / 5.0 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn kpca_prefixes_are_nested() {
        let (d, _) = generate_binary_synthetic(120, 9).unwrap();
        let k = KernelSpec::rbf(median_heuristic(&d.kernel_inputs()).unwrap()).unwrap();
        let big = kpca_basis(&k, &d, 8, &KpcaOptions::default()).unwrap();
        let small = kpca_basis(&k, &d, 3, &KpcaOptions::default()).unwrap();
        let pre = big.prefix(4).unwrap();
        assert_eq!(small.psi(), pre.psi());
    }

    #[test]
    fn nystrom_path_orthonormal() {
        let (d, _) = generate_binary_synthetic(400, 2).unwrap();
        let k = KernelSpec::rbf(median_heuristic(&d.kernel_inputs()).unwrap()).unwrap();
        let opts = KpcaOptions { nystrom_threshold: 100, landmarks: 80, ..Default::default() };
        let b = kpca_basis(&k, &d, 6, &opts).unwrap();
        let gram = b.psi().tr_mul(b.psi()) / d.len() as f64;
        assert!((gram - DMatrix::identity(7, 7)).amax() < 1e-6);
        let row = b.extend(d.t()[3], &d.context(3)).unwrap();
        for (j, v) in row.iter().enumerate() {
            assert!((v - b.psi()[(3, j)]).abs() < 1e-8);
        }
    }

    #[test]
    fn quantile_feature_scaling() {
        let (d, truth) = generate_binary_synthetic(50, 1).unwrap();
        let pol = Policy::evaluation_logistic();
        let tr = Arc::new(truth);
        let prop = {
            let tr = tr.clone();
            Arc::new(move |t: f64, x: &[f64]| tr.propensity(t, x))
        };
        let zero = quantile_feature_basis(&pol, &d, Arc::new(|_, _| 0.0), prop.clone()).unwrap();
        assert!(zero.is_degenerate());
        let one = quantile_feature_basis(&pol, &d, Arc::new(|_, x: &[f64]| 1.0 + x[0]), prop.clone()).unwrap();
        let three = quantile_feature_basis(&pol, &d, Arc::new(|_, x: &[f64]| 3.0 * (1.0 + x[0])), prop).unwrap();
        assert!((one.psi() * 3.0 - three.psi()).amax() < 1e-12);
    }

    #[test]
    fn arm_linear_blocks() {
        let (d, truth) = generate_binary_synthetic(40, 2).unwrap();
        let pol = Policy::evaluation_logistic();
        let tr = Arc::new(truth);
        let b = arm_linear_basis(&pol, &d, Arc::new(move |t: f64, x: &[f64]| tr.propensity(t, x))).unwrap();
        assert_eq!(b.dim(), 13);
        let p = d.propensities().unwrap();
        for i in 0..d.len() {
            let x = d.context(i);
            let s = pol.prob(d.t()[i], &x) / p[i];
            let (on, off) = if d.t()[i] == 1.0 { (7, 1) } else { (1, 7) };
            assert_eq!(b.psi()[(i, 0)], 1.0);
            assert!((b.psi()[(i, on)] - s).abs() < 1e-14);
            assert_eq!(b.psi()[(i, off)], 0.0);
            let row = b.extend(d.t()[i], &x).unwrap();
            for (j, v) in row.iter().enumerate() {
                assert!((v - b.psi()[(i, j)]).abs() < 1e-12);
            }
        }
    }
}
