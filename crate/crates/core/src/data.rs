//! Observational data, synthetic generators and the semi-analytic ground truth.
//!
//! Synthetic draws use one ChaCha20 stream per column so that every column is
//! a deterministic function of `(seed, stream)`:
//!
//! | stream | column                     |
//! |--------|----------------------------|
//! | 0      | contexts `X`               |
//! | 1      | actions `T`                |
//! | 2      | outcome noise of `Y(0)`    |
//! | 3      | outcome noise of `Y(1)`    |

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, CrispError, Result};
use crate::policy::Policy;
use crate::sensitivity::{box_bounds, BoxKind, Direction};
use crate::stats::{logistic, normal_cdf, normal_pdf, normal_pdf_with, normal_quantile};

pub const STREAM_CONTEXT: u64 = 0;
pub const STREAM_ACTION: u64 = 1;
pub const STREAM_OUTCOME0: u64 = 2;
pub const STREAM_OUTCOME1: u64 = 3;

/// Propensities below this are clamped so inverse weights stay finite.
pub const PROPENSITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionKind {
    Binary,
    Continuous,
}

/// Logged bandit feedback `(Y, T, X)` with behaviour propensities `p_obs(T|X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    t: DVector<f64>,
    x: DMatrix<f64>,
    p_obs: Option<DVector<f64>>,
    action_kind: ActionKind,
}

impl Dataset {
    pub fn new(
        y: DVector<f64>,
        t: DVector<f64>,
        x: DMatrix<f64>,
        p_obs: Option<DVector<f64>>,
        action_kind: ActionKind,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(invalid("dataset must contain at least one sample"));
        }
        if t.len() != n || x.nrows() != n {
            return Err(CrispError::Dimension(format!(
                "y has {n} rows, t has {}, x has {}",
                t.len(),
                x.nrows()
            )));
        }
        if let Some(p) = &p_obs {
            if p.len() != n {
                return Err(CrispError::Dimension(format!(
                    "p_obs has {} rows, expected {n}",
                    p.len()
                )));
            }
            if let Some(i) = p.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(invalid(format!("p_obs[{i}] = {} is not strictly positive", p[i])));
            }
        }
        if action_kind == ActionKind::Binary {
            if let Some(i) = t.iter().position(|v| *v != 0.0 && *v != 1.0) {
                return Err(invalid(format!("binary action t[{i}] = {} not in {{0,1}}", t[i])));
            }
        }
        Ok(Self { y, t, x, p_obs, action_kind })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn t(&self) -> &DVector<f64> {
        &self.t
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn context_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn context(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn action_kind(&self) -> ActionKind {
        self.action_kind
    }

    pub fn has_propensities(&self) -> bool {
        self.p_obs.is_some()
    }

    pub fn propensities(&self) -> Result<&DVector<f64>> {
        self.p_obs.as_ref().ok_or(CrispError::MissingPropensity)
    }

    pub fn with_propensities(&self, p_obs: DVector<f64>) -> Result<Self> {
        Self::new(self.y.clone(), self.t.clone(), self.x.clone(), Some(p_obs), self.action_kind)
    }

    pub fn with_outcomes(&self, y: DVector<f64>) -> Result<Self> {
        Self::new(y, self.t.clone(), self.x.clone(), self.p_obs.clone(), self.action_kind)
    }

    /// Rows selected by `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let y = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.y[i]));
        let t = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.t[i]));
        let x = self.x.select_rows(indices);
        let p_obs = self
            .p_obs
            .as_ref()
            .map(|p| DVector::from_iterator(indices.len(), indices.iter().map(|&i| p[i])));
        Self { y, t, x, p_obs, action_kind: self.action_kind }
    }

    /// Joint `(t, x)` coordinates fed to kernels. Binary actions are one-hot
    /// encoded as `(1 - t, t)` ahead of the context.
    pub fn kernel_inputs(&self) -> DMatrix<f64> {
        let n = self.len();
        let p = self.context_dim();
        match self.action_kind {
            ActionKind::Binary => DMatrix::from_fn(n, p + 2, |i, j| match j {
                0 => 1.0 - self.t[i],
                1 => self.t[i],
                _ => self.x[(i, j - 2)],
            }),
            ActionKind::Continuous => DMatrix::from_fn(n, p + 1, |i, j| {
                if j == 0 {
                    self.t[i]
                } else {
                    self.x[(i, j - 1)]
                }
            }),
        }
    }
}

/// Encodes a single `(t, x)` point the same way as [`Dataset::kernel_inputs`].
pub fn kernel_point(kind: ActionKind, t: f64, x: &[f64]) -> Vec<f64> {
    let mut z = Vec::with_capacity(x.len() + 2);
    match kind {
        ActionKind::Binary => {
            z.push(1.0 - t);
            z.push(t);
        }
        ActionKind::Continuous => z.push(t),
    }
    z.extend_from_slice(x);
    z
}

/// Parameters of the synthetic data generating process.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    pub action_kind: ActionKind,
    pub mu_x: Vec<f64>,
    pub beta_x0: Vec<f64>,
    pub beta_x1: Vec<f64>,
    pub intercept0: f64,
    pub intercept1: f64,
    pub beta_t: Vec<f64>,
    pub outcome_sd: f64,
}

impl SyntheticTruth {
    pub fn binary() -> Self {
        Self {
            action_kind: ActionKind::Binary,
            mu_x: vec![-1.0, 0.5, -1.0, 0.0, -1.0],
            beta_x0: vec![0.0, 0.5, -0.5, 0.0, 0.0],
            beta_x1: vec![-1.5, 1.5, -2.0, 1.0, 0.5],
            intercept0: 2.5,
            intercept1: 0.5,
            beta_t: vec![0.0, 0.75, -0.5, 0.0, -1.0],
            outcome_sd: 1.0,
        }
    }

    pub fn continuous() -> Self {
        Self { action_kind: ActionKind::Continuous, ..Self::binary() }
    }

    pub fn mu0(&self, x: &[f64]) -> f64 {
        dot(&self.beta_x0, x) + self.intercept0
    }

    pub fn mu1(&self, x: &[f64]) -> f64 {
        dot(&self.beta_x1, x) + self.intercept1
    }

    /// `logistic(beta_t' x)`: P(T=1|x) for binary data, the mean of T|x otherwise.
    pub fn action_score(&self, x: &[f64]) -> f64 {
        logistic(dot(&self.beta_t, x))
    }

    /// Behaviour propensity (mass or density) of action `t` at context `x`.
    pub fn propensity(&self, t: f64, x: &[f64]) -> f64 {
        let s = self.action_score(x);
        match self.action_kind {
            ActionKind::Binary => {
                if t == 1.0 {
                    s
                } else {
                    1.0 - s
                }
            }
            ActionKind::Continuous => normal_pdf_with(t, s, 1.0),
        }
    }

    /// Mean and standard deviation of `Y | T=t, X=x`.
    pub fn outcome_moments(&self, t: f64, x: &[f64]) -> (f64, f64) {
        let (m0, m1) = (self.mu0(x), self.mu1(x));
        match self.action_kind {
            ActionKind::Binary => {
                if t == 1.0 {
                    (m1, self.outcome_sd)
                } else {
                    (m0, self.outcome_sd)
                }
            }
            ActionKind::Continuous => {
                let sd = self.outcome_sd * ((1.0 - t).powi(2) + t * t).sqrt();
                ((1.0 - t) * m0 + t * m1, sd)
            }
        }
    }

    /// `tau`-quantile of `Y | T=t, X=x`.
    pub fn outcome_quantile(&self, t: f64, x: &[f64], tau: f64) -> f64 {
        let (mu, sd) = self.outcome_moments(t, x);
        mu + sd * normal_quantile(tau)
    }

    /// Flat `key=value` dump of the generator parameters.
    pub fn to_config_string(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let kind = match self.action_kind {
            ActionKind::Binary => "binary",
            ActionKind::Continuous => "continuous",
        };
        let _ = writeln!(s, "action_kind={kind}");
        let _ = writeln!(s, "mu_x={}", join(&self.mu_x));
        let _ = writeln!(s, "beta_x0={}", join(&self.beta_x0));
        let _ = writeln!(s, "beta_x1={}", join(&self.beta_x1));
        let _ = writeln!(s, "intercept0={}", self.intercept0);
        let _ = writeln!(s, "intercept1={}", self.intercept1);
        let _ = writeln!(s, "beta_t={}", join(&self.beta_t));
        let _ = writeln!(s, "outcome_sd={}", self.outcome_sd);
        s
    }

    /// Draws `n` contexts `X ~ N(mu_x, I)` from the context stream.
    pub fn sample_contexts(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let p = self.mu_x.len();
        let mut rng = column_rng(seed, STREAM_CONTEXT);
        let mut x = DMatrix::zeros(n, p);
        for i in 0..n {
            for j in 0..p {
                let z: f64 = rng.sample(StandardNormal);
                x[(i, j)] = self.mu_x[j] + z;
            }
        }
        x
    }

    /// Draws actions for the given contexts from the action stream.
    pub fn sample_actions(&self, x: &DMatrix<f64>, seed: u64) -> DVector<f64> {
        let mut rng = column_rng(seed, STREAM_ACTION);
        DVector::from_iterator(
            x.nrows(),
            (0..x.nrows()).map(|i| {
                let xi: Vec<f64> = x.row(i).iter().copied().collect();
                let s = self.action_score(&xi);
                match self.action_kind {
                    ActionKind::Binary => {
                        let u: f64 = rng.gen();
                        if u < s {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    ActionKind::Continuous => {
                        let z: f64 = rng.sample(StandardNormal);
                        s + z
                    }
                }
            }),
        )
    }

    /// Draws `n` samples from the generating process.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(invalid("n must be at least 1"));
        }
        let x = self.sample_contexts(n, seed);
        let t = self.sample_actions(&x, seed);
        let mut rng0 = column_rng(seed, STREAM_OUTCOME0);
        let mut rng1 = column_rng(seed, STREAM_OUTCOME1);
        let mut y = DVector::zeros(n);
        let mut p_obs = DVector::zeros(n);
        for i in 0..n {
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            let e0: f64 = rng0.sample(StandardNormal);
            let e1: f64 = rng1.sample(StandardNormal);
            let y0 = self.mu0(&xi) + self.outcome_sd * e0;
            let y1 = self.mu1(&xi) + self.outcome_sd * e1;
            y[i] = match self.action_kind {
                ActionKind::Binary => {
                    if t[i] == 1.0 {
                        y1
                    } else {
                        y0
                    }
                }
                ActionKind::Continuous => (1.0 - t[i]) * y0 + t[i] * y1,
            };
            p_obs[i] = self.propensity(t[i], &xi);
        }
        Dataset::new(y, t, x, Some(p_obs), self.action_kind)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

fn column_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Binary-action synthetic data with the true logistic propensities attached.
pub fn generate_binary_synthetic(n: usize, seed: u64) -> Result<(Dataset, SyntheticTruth)> {
    let truth = SyntheticTruth::binary();
    Ok((truth.sample(n, seed)?, truth))
}

/// Continuous-action variant: `T|X ~ N(logistic(beta_t' X), 1)` and
/// `Y = (1 - T) Y(0) + T Y(1)`; `p_obs` is the Gaussian density of the drawn T.
pub fn generate_continuous_synthetic(n: usize, seed: u64) -> Result<(Dataset, SyntheticTruth)> {
    let truth = SyntheticTruth::continuous();
    Ok((truth.sample(n, seed)?, truth))
}

/// Column names for CSV ingestion. Context columns are every header starting
/// with `x_prefix`, ordered by their numeric suffix.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub action_kind: ActionKind,
    pub y: String,
    pub t: String,
    pub x_prefix: String,
    pub p_obs: String,
}

impl CsvSchema {
    pub fn new(action_kind: ActionKind) -> Self {
        Self {
            action_kind,
            y: "y".into(),
            t: "t".into(),
            x_prefix: "x_".into(),
            p_obs: "p_obs".into(),
        }
    }
}

/// Reads a comma-separated file with a header row. Rows are numbered from 1
/// (the first data row) in error messages.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let missing = |name: &str| CrispError::Parse {
        row: 0,
        column: name.to_string(),
        message: "missing column in header".into(),
    };
    let y_col = find(&schema.y).ok_or_else(|| missing(&schema.y))?;
    let t_col = find(&schema.t).ok_or_else(|| missing(&schema.t))?;
    let p_col = find(&schema.p_obs);
    let mut x_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            h.trim()
                .strip_prefix(schema.x_prefix.as_str())
                .and_then(|s| s.parse::<usize>().ok())
                .map(|k| (k, i))
        })
        .collect();
    x_cols.sort();
    for (expected, (k, _)) in x_cols.iter().enumerate() {
        if *k != expected {
            return Err(missing(&format!("{}{expected}", schema.x_prefix)));
        }
    }

    let (mut y, mut t, mut p, mut x) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record?;
        let cell = |col: usize| -> Result<f64> {
            let name = headers.get(col).unwrap_or("").to_string();
            let raw = record.get(col).ok_or_else(|| CrispError::Parse {
                row,
                column: name.clone(),
                message: "missing cell".into(),
            })?;
            raw.trim().parse::<f64>().map_err(|_| CrispError::Parse {
                row,
                column: name,
                message: format!("non-numeric value `{raw}`"),
            })
        };
        y.push(cell(y_col)?);
        t.push(cell(t_col)?);
        if let Some(c) = p_col {
            p.push(cell(c)?);
        }
        for &(_, c) in &x_cols {
            x.push(cell(c)?);
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(CrispError::Parse { row: 1, column: schema.y.clone(), message: "no data rows".into() });
    }
    let x = DMatrix::from_row_slice(n, x_cols.len(), &x);
    let p_obs = p_col.map(|_| DVector::from_vec(p));
    Dataset::new(DVector::from_vec(y), DVector::from_vec(t), x, p_obs, schema.action_kind)
}

/// Writes `d` in the layout accepted by [`load_csv`] with default names.
pub fn write_csv(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let p = d.context_dim();
    let mut header = vec!["y".to_string(), "t".to_string()];
    header.extend((0..p).map(|j| format!("x_{j}")));
    if d.has_propensities() {
        header.push("p_obs".into());
    }
    w.write_record(&header)?;
    for i in 0..d.len() {
        let mut rec = vec![format!("{:?}", d.y[i]), format!("{:?}", d.t[i])];
        rec.extend((0..p).map(|j| format!("{:?}", d.x[(i, j)])));
        if let Some(po) = &d.p_obs {
            rec.push(format!("{:?}", po[i]));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Diagnostics of a propensity fit.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    /// Intercept first, then one coefficient per context column.
    pub coefficients: DVector<f64>,
    pub iterations: usize,
    pub ridge_used: bool,
    pub converged: bool,
}

const LOGISTIC_TOL: f64 = 1e-8;
const LOGISTIC_MAX_ITER: usize = 100;
const LOGISTIC_RIDGE: f64 = 1e-6;

/// Fits `P(T=1|X)` by Newton iterations on the logistic log-likelihood (with
/// intercept) and attaches the fitted probability of each observed action.
/// Falls back to a `1e-6` ridge penalty when the unpenalised fit is singular
/// or diverges.
pub fn fit_propensity_logistic(d: &Dataset) -> Result<(Dataset, PropensityFit)> {
    if d.action_kind != ActionKind::Binary {
        return Err(CrispError::Unsupported(
            "logistic propensity fitting requires binary actions".into(),
        ));
    }
    let n = d.len();
    let k = d.context_dim() + 1;
    let z = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { d.x[(i, j - 1)] });

    let fit = match newton_logistic(&z, &d.t, 0.0) {
        Some(f) if f.converged && !separated(&z, &d.t, &f.coefficients) => f,
        _ => {
            log::warn!("logistic propensity fit is singular or separated; using ridge penalty {LOGISTIC_RIDGE}");
            let mut f = newton_logistic(&z, &d.t, LOGISTIC_RIDGE)
                .ok_or_else(|| invalid("ridge-penalised logistic fit failed"))?;
            f.ridge_used = true;
            f
        }
    };

    let scores = &z * &fit.coefficients;
    let p = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let s = logistic(scores[i]);
            let p = if d.t[i] == 1.0 { s } else { 1.0 - s };
            p.clamp(PROPENSITY_FLOOR, 1.0)
        }),
    );
    Ok((d.with_propensities(p)?, fit))
}

/// Every sample on the correct side of the fitted hyperplane.
fn separated(z: &DMatrix<f64>, t: &DVector<f64>, beta: &DVector<f64>) -> bool {
    let s = z * beta;
    s.iter().zip(t.iter()).all(|(si, ti)| if *ti == 1.0 { *si > 0.0 } else { *si < 0.0 })
}

fn newton_logistic(z: &DMatrix<f64>, t: &DVector<f64>, ridge: f64) -> Option<PropensityFit> {
    let n = z.nrows() as f64;
    let k = z.ncols();
    let objective = |beta: &DVector<f64>| -> f64 {
        let s = z * beta;
        let ll: f64 = s
            .iter()
            .zip(t.iter())
            .map(|(&si, &ti)| ti * si - softplus(si))
            .sum::<f64>()
            / n;
        ll - 0.5 * ridge * beta.norm_squared()
    };

    let mut beta = DVector::zeros(k);
    let mut value = objective(&beta);
    for iter in 0..LOGISTIC_MAX_ITER {
        let s = z * &beta;
        let p = s.map(logistic);
        let resid = t - &p;
        let grad = z.tr_mul(&resid) / n - &beta * ridge;
        let wts = p.map(|pi| pi * (1.0 - pi));
        let mut h = DMatrix::zeros(k, k);
        for i in 0..z.nrows() {
            let row = z.row(i);
            h.ger(wts[i] / n, &row.transpose(), &row.transpose(), 1.0);
        }
        for j in 0..k {
            h[(j, j)] += ridge;
        }
        let chol = h.cholesky()?;
        // Reject near-singular curvature: the step would be meaningless.
        let diag_min = chol.l().diagonal().min();
        if !(diag_min > 1e-9) {
            return None;
        }
        if grad.amax() <= LOGISTIC_TOL {
            return Some(PropensityFit { coefficients: beta, iterations: iter, ridge_used: false, converged: true });
        }
        let step = chol.solve(&grad);
        let mut alpha = 1.0;
        loop {
            let cand = &beta + &step * alpha;
            let v = objective(&cand);
            if v >= value - 1e-15 || alpha < 1e-10 {
                beta = cand;
                value = v;
                break;
            }
            alpha *= 0.5;
        }
        if beta.amax() > 1e6 {
            return None;
        }
    }
    Some(PropensityFit { coefficients: beta, iterations: LOGISTIC_MAX_ITER, ridge_used: false, converged: false })
}

fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Sharp tan-box bound for binary synthetic data: contexts and actions are
/// simulated from the observational law and the inner expectation over `Y`
/// is evaluated in closed form from the Gaussian outcome model.
pub fn true_sharp_bound_mc(
    truth: &SyntheticTruth,
    policy: &Policy,
    gamma: f64,
    direction: Direction,
    n_mc: usize,
    seed: u64,
) -> Result<f64> {
    true_sharp_bound_mc_with_se(truth, policy, gamma, direction, n_mc, seed).map(|e| e.value)
}

pub fn true_sharp_bound_mc_with_se(
    truth: &SyntheticTruth,
    policy: &Policy,
    gamma: f64,
    direction: Direction,
    n_mc: usize,
    seed: u64,
) -> Result<McEstimate> {
    if truth.action_kind != ActionKind::Binary {
        return Err(CrispError::Unsupported("the sharp-bound oracle needs binary synthetic data".into()));
    }
    if !(gamma >= 1.0) {
        return Err(invalid(format!("Gamma must be >= 1, got {gamma}")));
    }
    if n_mc == 0 {
        return Err(invalid("n_mc must be at least 1"));
    }
    let x = truth.sample_contexts(n_mc, seed);
    let t = truth.sample_actions(&x, seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for i in 0..n_mc {
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        let v = sharp_conditional_value(truth, policy, gamma, direction, t[i], &xi)?;
        sum += v;
        sum_sq += v * v;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let var = if n_mc > 1 { (sum_sq - n * mean * mean) / (n - 1.0) } else { 0.0 };
    Ok(McEstimate { value: mean, std_error: (var.max(0.0) / n).sqrt() })
}

/// `(pi/p_obs) * E[w~ Y | t, x]` under the sharp weights for one `(t, x)`.
pub(crate) fn sharp_conditional_value(
    truth: &SyntheticTruth,
    policy: &Policy,
    gamma: f64,
    direction: Direction,
    t: f64,
    x: &[f64],
) -> Result<f64> {
    let p = truth.propensity(t, x);
    let (a, b) = box_bounds(BoxKind::Tan, gamma, p)?;
    let (mu, sd) = truth.outcome_moments(t, x);
    let ratio = policy.prob(t, x) / p;
    if b - a <= 1e-15 {
        return Ok(ratio * mu);
    }
    // Partial expectation E[Y 1{Y <= q}] for Y ~ N(mu, sd^2).
    let lower_part = |q: f64| {
        let z = (q - mu) / sd;
        mu * normal_cdf(z) - sd * normal_pdf(z)
    };
    let inner = match direction {
        Direction::Lower => {
            let tau = (1.0 - a) / (b - a);
            let lp = lower_part(mu + sd * normal_quantile(tau));
            b * lp + a * (mu - lp)
        }
        Direction::Upper => {
            let tau = (b - 1.0) / (b - a);
            let lp = lower_part(mu + sd * normal_quantile(tau));
            a * lp + b * (mu - lp)
        }
    };
    Ok(ratio * inner)
}
