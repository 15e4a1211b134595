//! Sensitivity models in `w~ = p_obs * w` units: box constraints and
//! f-divergence generators, with Fenchel conjugates restricted to `u >= 0`.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, CrispError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Lower,
    Upper,
}

impl Direction {
    /// `+1` for lower bounds, `-1` for upper bounds.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Lower => 1.0,
            Direction::Upper => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Lower => "lower",
            Direction::Upper => "upper",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoxKind {
    /// Tan's marginal sensitivity model (odds-ratio box).
    Tan,
    /// `1/Gamma <= pi_base / p_obs <= Gamma`.
    Ratio,
}

/// Per-sample `(a, b)` bounds on `w~`.
pub fn box_bounds(kind: BoxKind, gamma: f64, p_obs: f64) -> Result<(f64, f64)> {
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(invalid(format!("Gamma must be a finite value >= 1, got {gamma}")));
    }
    if !(p_obs > 0.0) {
        return Err(invalid(format!("p_obs must be positive, got {p_obs}")));
    }
    match kind {
        BoxKind::Tan => {
            if p_obs > 1.0 {
                return Err(invalid(format!("tan box needs p_obs in (0, 1], got {p_obs}")));
            }
            let q = 1.0 - p_obs;
            Ok((p_obs + q / gamma, p_obs + gamma * q))
        }
        BoxKind::Ratio => Ok((1.0 / gamma, gamma)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxModel {
    pub kind: BoxKind,
    pub gamma: f64,
}

impl BoxModel {
    pub fn tan(gamma: f64) -> Self {
        Self { kind: BoxKind::Tan, gamma }
    }

    pub fn ratio(gamma: f64) -> Self {
        Self { kind: BoxKind::Ratio, gamma }
    }

    pub fn bounds(&self, p_obs: f64) -> Result<(f64, f64)> {
        box_bounds(self.kind, self.gamma, p_obs)
    }

    /// Quantile level of the sharp lower-bound threshold (tan box only).
    pub fn tau(&self) -> f64 {
        1.0 / (1.0 + self.gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Divergence {
    Kl,
    ReverseKl,
    SquaredHellinger,
    PearsonChi2,
    NeymanChi2,
    TotalVariation,
}

impl Divergence {
    pub const ALL: [Divergence; 6] = [
        Divergence::Kl,
        Divergence::ReverseKl,
        Divergence::SquaredHellinger,
        Divergence::PearsonChi2,
        Divergence::NeymanChi2,
        Divergence::TotalVariation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Divergence::Kl => "KL",
            Divergence::ReverseKl => "reverseKL",
            Divergence::SquaredHellinger => "squaredHellinger",
            Divergence::PearsonChi2 => "pearsonChi2",
            Divergence::NeymanChi2 => "neymanChi2",
            Divergence::TotalVariation => "totalVariation",
        }
    }

    /// Generator `f(u)`, `+inf` for `u < 0`.
    pub fn f(self, u: f64) -> f64 {
        if u < 0.0 {
            return f64::INFINITY;
        }
        match self {
            Divergence::Kl => {
                if u == 0.0 {
                    0.0
                } else {
                    u * u.ln()
                }
            }
            Divergence::ReverseKl => {
                if u == 0.0 {
                    f64::INFINITY
                } else {
                    -u.ln()
                }
            }
            Divergence::SquaredHellinger => (u.sqrt() - 1.0).powi(2),
            Divergence::PearsonChi2 => (u - 1.0).powi(2),
            Divergence::NeymanChi2 => {
                if u == 0.0 {
                    f64::INFINITY
                } else {
                    (1.0 - u).powi(2) / u
                }
            }
            Divergence::TotalVariation => 0.5 * (u - 1.0).abs(),
        }
    }

    /// Closed-form `f*(v) = sup_{u >= 0} uv - f(u)` and its subdifferential.
    pub fn conjugate(self, v: f64) -> Conjugate {
        match self {
            Divergence::Kl => {
                let e = (v - 1.0).exp();
                Conjugate::point(e, e)
            }
            Divergence::ReverseKl => {
                if v < 0.0 {
                    Conjugate::point(-1.0 - (-v).ln(), -1.0 / v)
                } else {
                    Conjugate::infinite()
                }
            }
            Divergence::SquaredHellinger => {
                if v < 1.0 {
                    let s = 1.0 - v;
                    Conjugate::point(v / s, 1.0 / (s * s))
                } else {
                    Conjugate::infinite()
                }
            }
            Divergence::PearsonChi2 => {
                if v >= -2.0 {
                    Conjugate::point(v + 0.25 * v * v, 1.0 + 0.5 * v)
                } else {
                    Conjugate::point(-1.0, 0.0)
                }
            }
            Divergence::NeymanChi2 => {
                if v < 1.0 {
                    let s = (1.0 - v).sqrt();
                    Conjugate::point(2.0 - 2.0 * s, 1.0 / s)
                } else if v == 1.0 {
                    // Supremum approached as u -> inf, never attained.
                    Conjugate { value: 2.0, lo: f64::INFINITY, hi: f64::NEG_INFINITY }
                } else {
                    Conjugate::infinite()
                }
            }
            Divergence::TotalVariation => {
                if v < -0.5 {
                    Conjugate::point(-0.5, 0.0)
                } else if v == -0.5 {
                    Conjugate { value: -0.5, lo: 0.0, hi: 1.0 }
                } else if v < 0.5 {
                    Conjugate::point(v, 1.0)
                } else if v == 0.5 {
                    Conjugate { value: 0.5, lo: 1.0, hi: f64::INFINITY }
                } else {
                    Conjugate::infinite()
                }
            }
        }
    }

    /// Second derivative of `f*` where it exists (0 on linear pieces).
    pub fn conjugate_second(self, v: f64) -> f64 {
        match self {
            Divergence::Kl => (v - 1.0).exp(),
            Divergence::ReverseKl => {
                if v < 0.0 {
                    1.0 / (v * v)
                } else {
                    f64::INFINITY
                }
            }
            Divergence::SquaredHellinger => {
                if v < 1.0 {
                    2.0 / (1.0 - v).powi(3)
                } else {
                    f64::INFINITY
                }
            }
            Divergence::PearsonChi2 => {
                if v >= -2.0 {
                    0.5
                } else {
                    0.0
                }
            }
            Divergence::NeymanChi2 => {
                if v < 1.0 {
                    0.5 * (1.0 - v).powf(-1.5)
                } else {
                    f64::INFINITY
                }
            }
            Divergence::TotalVariation => 0.0,
        }
    }

    /// Largest `v` at which `f*` is finite and differentiable, if bounded.
    pub fn domain_sup(self) -> Option<f64> {
        match self {
            Divergence::Kl | Divergence::PearsonChi2 => None,
            Divergence::ReverseKl => Some(0.0),
            Divergence::SquaredHellinger | Divergence::NeymanChi2 => Some(1.0),
            Divergence::TotalVariation => Some(0.5),
        }
    }
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Divergence {
    type Err = CrispError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "kl" => Divergence::Kl,
            "reversekl" | "rkl" => Divergence::ReverseKl,
            "squaredhellinger" | "hellinger" => Divergence::SquaredHellinger,
            "pearsonchi2" | "pearson" | "chi2" => Divergence::PearsonChi2,
            "neymanchi2" | "neyman" => Divergence::NeymanChi2,
            "totalvariation" | "tv" => Divergence::TotalVariation,
            _ => return Err(invalid(format!("unknown divergence `{s}`"))),
        })
    }
}

/// Value of a conjugate with its subdifferential `[lo, hi]`; the interval is
/// empty (`lo > hi`) when the supremum is not attained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conjugate {
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Conjugate {
    fn point(value: f64, slope: f64) -> Self {
        Self { value, lo: slope, hi: slope }
    }

    fn infinite() -> Self {
        Self { value: f64::INFINITY, lo: f64::INFINITY, hi: f64::NEG_INFINITY }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }
}

/// Conjugate of the box indicator on `[a, b]`: `a v` for `v < 0`, `b v` for `v > 0`.
pub fn box_conjugate(a: f64, b: f64, v: f64) -> Conjugate {
    if v < 0.0 {
        Conjugate::point(a * v, a)
    } else if v > 0.0 {
        Conjugate::point(b * v, b)
    } else {
        Conjugate { value: 0.0, lo: a, hi: b }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FDivergenceModel {
    pub generator: Divergence,
    pub gamma: f64,
    pub add_mean_one_constraint: bool,
}

impl FDivergenceModel {
    pub fn new(generator: Divergence, gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(invalid(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        Ok(Self { generator, gamma, add_mean_one_constraint: true })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SensitivityModel {
    Box(BoxModel),
    F(FDivergenceModel),
}

impl SensitivityModel {
    pub fn tan(gamma: f64) -> Self {
        SensitivityModel::Box(BoxModel::tan(gamma))
    }

    pub fn ratio(gamma: f64) -> Self {
        SensitivityModel::Box(BoxModel::ratio(gamma))
    }

    pub fn f(generator: Divergence, gamma: f64) -> Result<Self> {
        FDivergenceModel::new(generator, gamma).map(SensitivityModel::F)
    }

    /// Budget parameter: Gamma for boxes, gamma for divergences.
    pub fn param(&self) -> f64 {
        match self {
            SensitivityModel::Box(b) => b.gamma,
            SensitivityModel::F(f) => f.gamma,
        }
    }

    pub fn name(&self) -> String {
        match self {
            SensitivityModel::Box(b) => match b.kind {
                BoxKind::Tan => "tan".into(),
                BoxKind::Ratio => "ratio".into(),
            },
            SensitivityModel::F(f) => f.generator.name().into(),
        }
    }

    /// Same model with a different budget.
    pub fn with_param(&self, value: f64) -> Result<Self> {
        match self {
            SensitivityModel::Box(b) => {
                box_bounds(b.kind, value, 0.5)?;
                Ok(SensitivityModel::Box(BoxModel { kind: b.kind, gamma: value }))
            }
            SensitivityModel::F(f) => {
                let mut m = FDivergenceModel::new(f.generator, value)?;
                m.add_mean_one_constraint = f.add_mean_one_constraint;
                Ok(SensitivityModel::F(m))
            }
        }
    }

    /// Generator at a sample with behaviour propensity `p_obs`.
    pub fn generator(&self, p_obs: f64) -> Result<Generator> {
        match self {
            SensitivityModel::Box(b) => {
                let (a, bb) = b.bounds(p_obs)?;
                Ok(Generator::Box { a, b: bb })
            }
            SensitivityModel::F(f) => Ok(Generator::Divergence(f.generator)),
        }
    }
}

impl fmt::Display for SensitivityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name(), self.param())
    }
}

impl FromStr for SensitivityModel {
    type Err = CrispError;

    /// Parses `name:param`, e.g. `tan:1.5`, `ratio:2`, `KL:0.05`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, param) = s
            .split_once(':')
            .ok_or_else(|| invalid(format!("model `{s}` must look like name:param")))?;
        let value: f64 = param
            .trim()
            .parse()
            .map_err(|_| invalid(format!("model parameter `{param}` is not a number")))?;
        match name.trim().to_ascii_lowercase().as_str() {
            "tan" | "msm" => {
                box_bounds(BoxKind::Tan, value, 0.5)?;
                Ok(SensitivityModel::tan(value))
            }
            "ratio" | "box" => {
                box_bounds(BoxKind::Ratio, value, 0.5)?;
                Ok(SensitivityModel::ratio(value))
            }
            other => SensitivityModel::f(other.parse()?, value),
        }
    }
}

/// Per-sample generator `f_{t,x}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Generator {
    Box { a: f64, b: f64 },
    Divergence(Divergence),
}

impl Generator {
    pub fn f(&self, u: f64) -> f64 {
        match *self {
            Generator::Box { a, b } => {
                if u >= a && u <= b {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Generator::Divergence(d) => d.f(u),
        }
    }

    pub fn conjugate(&self, v: f64) -> Conjugate {
        match *self {
            Generator::Box { a, b } => box_conjugate(a, b, v),
            Generator::Divergence(d) => d.conjugate(v),
        }
    }

    /// Interval outside of which `f` is infinite.
    fn support(&self) -> (f64, f64) {
        match *self {
            Generator::Box { a, b } => (a, b),
            Generator::Divergence(_) => (0.0, f64::INFINITY),
        }
    }
}

/// `conjugate(model, v)` at a sample with behaviour propensity `p_obs`.
pub fn conjugate(model: &SensitivityModel, v: f64, p_obs: f64) -> Result<Conjugate> {
    Ok(model.generator(p_obs)?.conjugate(v))
}

/// Search grid for [`oracle_conjugate`].
#[derive(Debug, Clone, Copy)]
pub struct OracleGrid {
    pub u_max: f64,
    pub u_min_positive: f64,
    pub points: usize,
}

impl Default for OracleGrid {
    fn default() -> Self {
        Self { u_max: 50.0, u_min_positive: 1e-10, points: 4000 }
    }
}

/// Brute-force `sup_{u in [0, u_max]} uv - f(u)`: log-spaced scan followed by
/// golden-section refinement around the best grid point. Returns
/// `(value, argmax)`. When the true supremum is unbounded the result is the
/// value at the grid edge, which grows with `u_max`.
pub fn oracle_conjugate(generator: &Generator, v: f64, grid: &OracleGrid) -> (f64, f64) {
    let (lo, hi) = generator.support();
    let hi = hi.min(grid.u_max);
    let obj = |u: f64| {
        let fu = generator.f(u);
        if fu.is_finite() {
            u * v - fu
        } else {
            f64::NEG_INFINITY
        }
    };

    let mut us = Vec::with_capacity(grid.points + 2);
    us.push(lo);
    let start = lo.max(grid.u_min_positive);
    if hi > start {
        let (l0, l1) = (start.ln(), hi.ln());
        for k in 0..grid.points {
            us.push((l0 + (l1 - l0) * k as f64 / (grid.points - 1) as f64).exp());
        }
    }
    us.push(hi);
    us.sort_by(|a, b| a.total_cmp(b));
    us.dedup();

    let (mut best_k, mut best) = (0, f64::NEG_INFINITY);
    for (k, &u) in us.iter().enumerate() {
        let val = obj(u);
        if val > best {
            best = val;
            best_k = k;
        }
    }
    let mut l = us[best_k.saturating_sub(1)];
    let mut r = us[(best_k + 1).min(us.len() - 1)];
    let (mut arg, mut val) = (us[best_k], best);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..200 {
        if r - l <= 1e-15 * (1.0 + r.abs()) {
            break;
        }
        let m1 = r - phi * (r - l);
        let m2 = l + phi * (r - l);
        let (f1, f2) = (obj(m1), obj(m2));
        if f1 >= f2 {
            r = m2;
        } else {
            l = m1;
        }
        for (u, fv) in [(m1, f1), (m2, f2)] {
            if fv > val {
                val = fv;
                arg = u;
            }
        }
    }
    (val, arg)
}
