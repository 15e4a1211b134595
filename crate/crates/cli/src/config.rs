//! Flat `key = value` configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crisp_core::{ActionKind, Divergence, SensitivityModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    BoundsVsGamma,
    FSensitivity,
    Ci,
    Coverage,
    ModelSelect,
    PolicyLearn,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::BoundsVsGamma => "bounds-vs-gamma",
            Experiment::FSensitivity => "f-sensitivity",
            Experiment::Ci => "ci",
            Experiment::Coverage => "coverage",
            Experiment::ModelSelect => "model-select",
            Experiment::PolicyLearn => "policy-learn",
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    SyntheticBinary,
    SyntheticContinuous,
    Csv { path: PathBuf, action: ActionKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    Kpca,
    ArmLinear,
}

/// Validated settings for one run. Experiments ignore keys they do not use.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub data: DataSource,
    pub n: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Model family, e.g. `tan`; the grid supplies the parameter.
    pub model: String,
    pub gammas: Vec<f64>,
    pub gamma: f64,
    pub divergences: Vec<Divergence>,
    pub estimators: Vec<String>,
    pub basis: BasisKind,
    pub dim: usize,
    pub dims: Vec<usize>,
    pub alpha: f64,
    pub knn: usize,
    pub folds: usize,
    pub reps: usize,
    pub nulls: Vec<f64>,
    pub n_mc: usize,
    pub n_test: usize,
    pub test_seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub backtracking: bool,
    pub inner: Vec<String>,
}

const KEYS: &[&str] = &[
    "data", "csv", "action", "n", "seed", "out", "model", "gammas", "gamma", "divergences", "estimators", "basis", "dim",
    "dims", "alpha", "knn", "folds", "reps", "nulls", "n_mc", "n_test", "test_seed", "steps", "lr", "backtracking",
    "inner", "experiment",
];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("line {}: expected key = value, got `{line}`", lineno + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// `--key value` pairs (also `--key=value`).
pub fn parse_overrides(args: &[String]) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").ok_or_else(|| err(format!("unexpected argument `{a}`")))?;
        if let Some((k, v)) = key.split_once('=') {
            map.insert(k.replace('-', "_"), v.to_string());
        } else {
            let v = it.next().ok_or_else(|| err(format!("flag --{key} needs a value")))?;
            map.insert(key.replace('-', "_"), v.clone());
        }
    }
    Ok(map)
}

fn list<T: FromStr>(key: &str, s: &str) -> Result<Vec<T>, ConfigError> {
    let v: Result<Vec<T>, _> = s.split(',').map(|p| p.trim()).filter(|p| !p.is_empty()).map(|p| p.parse()).collect();
    let v = v.map_err(|_| err(format!("{key}: cannot parse `{s}`")))?;
    if v.is_empty() {
        return Err(err(format!("{key} must not be empty")));
    }
    Ok(v)
}

/// `start:stop:step` or a comma list.
fn grid(key: &str, s: &str) -> Result<Vec<f64>, ConfigError> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return list(key, s);
    }
    let nums: Vec<f64> = list(key, &parts.join(","))?;
    let (a, b, h) = (nums[0], nums[1], nums[2]);
    if !(h > 0.0) || b < a {
        return Err(err(format!("{key}: range `{s}` needs start <= stop and a positive step")));
    }
    let count = ((b - a) / h + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|k| a + h * k as f64).collect())
}

struct Lookup<'a> {
    map: &'a BTreeMap<String, String>,
}

impl Lookup<'_> {
    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.get(key) {
            Some(v) => v.parse().map_err(|_| err(format!("{key}: cannot parse `{v}`"))),
            None => Ok(default),
        }
    }

    fn list_or<T: FromStr>(&self, key: &str, default: &str) -> Result<Vec<T>, ConfigError> {
        list(key, self.get(key).unwrap_or(default))
    }
}

impl ExperimentConfig {
    pub fn load(experiment: Experiment, path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut map = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| err(format!("cannot read {}: {e}", p.display())))?;
                parse_kv(&text)?
            }
            None => BTreeMap::new(),
        };
        map.extend(parse_overrides(overrides)?);
        Self::from_map(experiment, &map)
    }

    pub fn from_map(experiment: Experiment, map: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(err(format!("unknown key `{k}`")));
        }
        if let Some(e) = map.get("experiment") {
            if e != experiment.name() {
                return Err(err(format!("config is for `{e}`, not `{}`", experiment.name())));
            }
        }
        let l = Lookup { map };
        let (d_n, d_gammas, d_dims, d_model) = match experiment {
            Experiment::FSensitivity => (4000, "0.01,0.02,0.05,0.1,0.2", "20", "KL"),
            Experiment::Coverage => (500, "1.5", "20", "tan"),
            Experiment::ModelSelect => (1000, "1.5", "1,2,4,8,16,32,64,128,256", "tan"),
            Experiment::Ci => (1000, "1,1.5,2,3", "20", "tan"),
            _ => (1000, "1,1.5,2,3,5", "20", "tan"),
        };
        let data = match l.get("data").unwrap_or("synthetic-binary") {
            "synthetic-binary" => DataSource::SyntheticBinary,
            "synthetic-continuous" => DataSource::SyntheticContinuous,
            "csv" => {
                let path = l.get("csv").ok_or_else(|| err("data = csv needs a `csv` path"))?;
                let action = match l.get("action").unwrap_or("binary") {
                    "binary" => ActionKind::Binary,
                    "continuous" => ActionKind::Continuous,
                    other => return Err(err(format!("action: unknown kind `{other}`"))),
                };
                DataSource::Csv { path: PathBuf::from(path), action }
            }
            other => return Err(err(format!("data: unknown source `{other}`"))),
        };
        let d_basis = if experiment == Experiment::Coverage { "arm-linear" } else { "kpca" };
        let basis = match l.get("basis").unwrap_or(d_basis) {
            "kpca" => BasisKind::Kpca,
            "arm-linear" => BasisKind::ArmLinear,
            other => return Err(err(format!("basis: unknown kind `{other}`"))),
        };
        let divergences = l
            .list_or::<String>("divergences", "KL,reverseKL,squaredHellinger,pearsonChi2,neymanChi2,totalVariation")?
            .iter()
            .map(|s| s.parse::<Divergence>().map_err(|e| err(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let seed: u64 = l.or("seed", 0)?;
        let cfg = Self {
            experiment,
            data,
            n: l.or("n", d_n)?,
            seed,
            out: PathBuf::from(l.get("out").unwrap_or("crisp-out")),
            model: l.get("model").unwrap_or(d_model).to_string(),
            gammas: grid("gammas", l.get("gammas").unwrap_or(d_gammas))?,
            gamma: l.or("gamma", 1.5)?,
            divergences,
            estimators: l.list_or("estimators", "kcmc,zsb,qb")?,
            basis,
            dim: l.or("dim", 20)?,
            dims: l.list_or("dims", d_dims)?,
            alpha: l.or("alpha", 0.05)?,
            knn: l.or("knn", 50)?,
            folds: l.or("folds", 10)?,
            reps: l.or("reps", 200)?,
            nulls: grid("nulls", l.get("nulls").unwrap_or("2.9:4.1:0.01"))?,
            n_mc: l.or("n_mc", 1_000_000)?,
            n_test: l.or("n_test", 1000)?,
            test_seed: l.or("test_seed", seed.wrapping_add(1))?,
            steps: l.or("steps", 100)?,
            lr: l.or("lr", 0.05)?,
            backtracking: l.or("backtracking", false)?,
            inner: l.list_or("inner", "kcmc,zsb")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.n == 0 {
            return Err(err("n must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(err("alpha must lie in (0, 1)"));
        }
        if self.dim == 0 || self.dims.contains(&0) {
            return Err(err("basis dimensions must be positive"));
        }
        if self.folds < 2 {
            return Err(err("folds must be at least 2"));
        }
        if self.reps == 0 || self.steps == 0 || self.n_test == 0 || self.knn == 0 {
            return Err(err("reps, steps, n_test and knn must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(err("lr must be positive"));
        }
        for e in &self.estimators {
            if !matches!(e.as_str(), "kcmc" | "zsb" | "qb") {
                return Err(err(format!("estimators: unknown `{e}`")));
            }
        }
        for e in &self.inner {
            if !matches!(e.as_str(), "kcmc" | "zsb") {
                return Err(err(format!("inner: unknown `{e}`")));
            }
        }
        if self.experiment == Experiment::Coverage && matches!(self.data, DataSource::Csv { .. }) {
            return Err(err("coverage resamples from the generator and needs synthetic data"));
        }
        if self.experiment == Experiment::ModelSelect && self.basis != BasisKind::Kpca {
            return Err(err("model-select compares nested KPCA bases; use basis = kpca"));
        }
        match self.experiment {
            Experiment::FSensitivity => {
                for &d in &self.divergences {
                    self.model_at(d.name(), 0.1)?;
                }
                for &g in &self.gammas {
                    if !(g >= 0.0) {
                        return Err(err("f-divergence budgets must be >= 0"));
                    }
                }
            }
            Experiment::Coverage | Experiment::ModelSelect | Experiment::PolicyLearn => {
                self.model_at(&self.model, self.gamma)?;
            }
            _ => {
                for &g in &self.gammas {
                    self.model_at(&self.model, g)?;
                }
            }
        }
        Ok(())
    }

    pub fn model_at(&self, family: &str, param: f64) -> Result<SensitivityModel, ConfigError> {
        format!("{family}:{param}").parse::<SensitivityModel>().map_err(|e| err(format!("model: {e}")))
    }

    /// Settings echoed into the run log.
    pub fn describe(&self) -> String {
        format!("{self:?}")
    }
}
