//! The six experiment drivers. Each writes `results.csv`, a summary table and
//! a chart into the output directory.

use std::fmt::Display;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use crisp_core::stats::logistic;
use crisp_core::{
    arm_linear_basis, confidence_interval, cross_validate, fit_propensity_logistic, generate_binary_synthetic,
    generate_continuous_synthetic, gic, hajek, ipw, kcmc_bound, kpca_basis, learn_policy_maxmin, load_csv,
    median_heuristic, qb_bound, sandwich, true_sharp_bound_mc, zsb_bound, ActionKind, BoundReport, BoxKind,
    ConstraintBasis, CsvSchema, Dataset, Direction, InnerEstimator, KernelSpec, KpcaOptions, LearnOptions, Policy,
    SandwichOptions, SensitivityModel, SyntheticTruth, TestSet,
};
use rayon::prelude::*;

use crate::config::{BasisKind, DataSource, Experiment, ExperimentConfig};
use crate::output::{line_chart, num, write_results, Inference, ResultRow, Series, Table};

type PropensityFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

#[derive(Debug)]
pub enum RunError {
    /// Bad input; nothing was computed.
    Input(String),
    /// Could not continue; earlier output is kept.
    Fatal(String),
}

impl Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Input(m) | RunError::Fatal(m) => f.write_str(m),
        }
    }
}

fn fatal(e: impl Display) -> RunError {
    RunError::Fatal(e.to_string())
}

/// Timestamped progress lines in `run.log`.
pub struct RunLog {
    file: File,
}

impl RunLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        Ok(Self { file: OpenOptions::new().create(true).append(true).open(path)? })
    }

    pub fn line(&mut self, msg: impl Display) {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let _ = writeln!(self.file, "[{ts:.3}] {msg}");
        log::info!("{msg}");
    }
}

struct Setup {
    data: Dataset,
    truth: Option<SyntheticTruth>,
    policy: Policy,
    propensity: Arc<PropensityFn>,
}

/// The evaluation policy, with coefficients padded or cut to the context width.
fn default_policy(kind: ActionKind, width: usize) -> Policy {
    let mut p = match kind {
        ActionKind::Binary => Policy::evaluation_logistic(),
        ActionKind::Continuous => Policy::evaluation_gaussian(),
    };
    match &mut p {
        Policy::Logistic { beta } | Policy::Gaussian { beta, .. } => beta.resize(width, 0.0),
        Policy::Mixed { .. } => {}
    }
    p
}

fn zero_policy(kind: ActionKind, width: usize) -> Policy {
    match kind {
        ActionKind::Binary => Policy::Logistic { beta: vec![0.0; width] },
        ActionKind::Continuous => Policy::Gaussian { beta: vec![0.0; width], variance: 0.25 },
    }
}

fn truth_propensity(truth: &SyntheticTruth) -> Arc<PropensityFn> {
    let t = truth.clone();
    Arc::new(move |a: f64, x: &[f64]| t.propensity(a, x))
}

fn load(cfg: &ExperimentConfig) -> Result<Setup, RunError> {
    let synthetic = |d: Dataset, truth: SyntheticTruth| {
        let policy = default_policy(d.action_kind(), d.context_dim());
        let propensity = truth_propensity(&truth);
        Setup { data: d, truth: Some(truth), policy, propensity }
    };
    match &cfg.data {
        DataSource::SyntheticBinary => {
            let (d, t) = generate_binary_synthetic(cfg.n, cfg.seed).map_err(fatal)?;
            Ok(synthetic(d, t))
        }
        DataSource::SyntheticContinuous => {
            let (d, t) = generate_continuous_synthetic(cfg.n, cfg.seed).map_err(fatal)?;
            Ok(synthetic(d, t))
        }
        DataSource::Csv { path, action } => {
            let d = load_csv(path, &CsvSchema::new(*action)).map_err(|e| RunError::Input(format!("{}: {e}", path.display())))?;
            let policy = default_policy(*action, d.context_dim());
            if *action == ActionKind::Continuous {
                if !d.has_propensities() {
                    return Err(RunError::Input("continuous actions need a p_obs column".into()));
                }
                let propensity: Arc<PropensityFn> = Arc::new(|_, _| f64::NAN);
                return Ok(Setup { data: d, truth: None, policy, propensity });
            }
            let (fitted, fit) = fit_propensity_logistic(&d).map_err(fatal)?;
            let data = if d.has_propensities() { d } else { fitted };
            let c = fit.coefficients.clone();
            let propensity: Arc<PropensityFn> = Arc::new(move |t: f64, x: &[f64]| {
                let p1 = logistic(c[0] + x.iter().zip(c.iter().skip(1)).map(|(a, b)| a * b).sum::<f64>());
                if t == 1.0 {
                    p1
                } else {
                    1.0 - p1
                }
            });
            Ok(Setup { data, truth: None, policy, propensity })
        }
    }
}

fn build_basis(cfg: &ExperimentConfig, s: &Setup, d: &Dataset, dim: usize) -> crisp_core::Result<ConstraintBasis> {
    match cfg.basis {
        BasisKind::Kpca => {
            let bw = median_heuristic(&d.kernel_inputs())?;
            kpca_basis(&KernelSpec::rbf(bw)?, d, dim, &KpcaOptions { seed: cfg.seed, ..Default::default() })
        }
        BasisKind::ArmLinear => arm_linear_basis(&s.policy, d, s.propensity.clone()),
    }
}

fn infer(d: &Dataset, r: &BoundReport, cfg: &ExperimentConfig) -> Result<Inference, String> {
    let opts = SandwichOptions { knn: cfg.knn, ..Default::default() };
    let s = sandwich(d, r, &opts).map_err(|e| e.to_string())?;
    Ok(Inference {
        ci: Some(confidence_interval(r, &s, cfg.alpha, false).map_err(|e| e.to_string())?),
        ci_corrected: Some(confidence_interval(r, &s, cfg.alpha, true).map_err(|e| e.to_string())?),
        gic: Some(gic(r, &s)),
    })
}

/// Seed for replicate `rep`, independent of scheduling.
fn rep_seed(seed: u64, rep: usize) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(rep as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const DIRECTIONS: [Direction; 2] = [Direction::Lower, Direction::Upper];

/// Outcome of one run: how many tasks failed.
pub struct RunOutcome {
    pub failures: usize,
}

struct Collector {
    rows: Vec<ResultRow>,
    failures: usize,
}

impl Collector {
    fn new() -> Self {
        Self { rows: Vec::new(), failures: 0 }
    }

    fn fail(&mut self, log: &mut RunLog, what: impl Display, e: impl Display) {
        self.failures += 1;
        log::error!("{what}: {e}");
        log.line(format!("FAILED {what}: {e}"));
    }
}

fn write_table(out: &Path, name: &str, t: &Table) -> Result<(), RunError> {
    t.write(&out.join(format!("{name}.csv"))).map_err(fatal)
}

fn write_chart(out: &Path, name: &str, svg: String) -> Result<(), RunError> {
    std::fs::write(out.join(format!("{name}.svg")), svg).map_err(fatal)
}

pub fn run(cfg: &ExperimentConfig, log: &mut RunLog) -> Result<RunOutcome, RunError> {
    let setup = load(cfg)?;
    log.line(format!(
        "{}: {} samples, {} context columns, {:?} actions",
        cfg.experiment.name(),
        setup.data.len(),
        setup.data.context_dim(),
        setup.data.action_kind()
    ));
    let mut col = Collector::new();
    let res = match cfg.experiment {
        Experiment::BoundsVsGamma => bounds_vs_gamma(cfg, &setup, log, &mut col),
        Experiment::FSensitivity => f_sensitivity(cfg, &setup, log, &mut col),
        Experiment::Ci => ci(cfg, &setup, log, &mut col),
        Experiment::Coverage => coverage(cfg, &setup, log, &mut col),
        Experiment::ModelSelect => model_select(cfg, &setup, log, &mut col),
        Experiment::PolicyLearn => policy_learn(cfg, &setup, log, &mut col),
    };
    // partial rows survive a fatal error
    write_results(&cfg.out.join("results.csv"), &col.rows).map_err(fatal)?;
    res?;
    Ok(RunOutcome { failures: col.failures })
}

#[derive(Clone, Copy, PartialEq)]
enum Est {
    Kcmc,
    Zsb,
    Qb,
}

fn bounds_vs_gamma(cfg: &ExperimentConfig, s: &Setup, log: &mut RunLog, col: &mut Collector) -> Result<(), RunError> {
    let d = &s.data;
    let basis = build_basis(cfg, s, d, cfg.dim).map_err(fatal)?;
    let features = arm_linear_basis(&s.policy, d, s.propensity.clone()).map_err(fatal)?;
    let family_model = cfg.model_at(&cfg.model, cfg.gammas[0]).map_err(|e| RunError::Input(e.0))?;
    let mut ests = Vec::new();
    for e in &cfg.estimators {
        let est = match e.as_str() {
            "kcmc" => Est::Kcmc,
            "zsb" => Est::Zsb,
            _ => Est::Qb,
        };
        let skip = match est {
            Est::Zsb if d.action_kind() != ActionKind::Binary => Some("needs binary actions"),
            Est::Zsb if !matches!(family_model, SensitivityModel::Box(_)) => Some("needs a box model"),
            Est::Qb if !matches!(family_model, SensitivityModel::Box(b) if b.kind == BoxKind::Tan) => {
                Some("needs the tan model")
            }
            _ => None,
        };
        match skip {
            Some(why) => log.line(format!("skipping {e}: {why}")),
            None => ests.push((e.clone(), est)),
        }
    }
    let tasks: Vec<(f64, usize, Direction)> = cfg
        .gammas
        .iter()
        .flat_map(|&g| (0..ests.len()).flat_map(move |k| DIRECTIONS.map(|dir| (g, k, dir))))
        .collect();
    log.line(format!("{} bound computations", tasks.len()));
    let results: Vec<_> = tasks
        .par_iter()
        .map(|&(g, k, dir)| -> crisp_core::Result<(BoundReport, usize)> {
            let model = cfg.model_at(&cfg.model, g).map_err(|e| crisp_core::CrispError::InvalidArgument(e.0))?;
            match ests[k].1 {
                Est::Kcmc => Ok((kcmc_bound(d, &s.policy, &model, &basis, dir)?, basis.dim())),
                Est::Zsb => match model {
                    SensitivityModel::Box(b) => Ok((zsb_bound(d, &s.policy, &b, dir)?, 2)),
                    SensitivityModel::F(_) => unreachable!("filtered above"),
                },
                Est::Qb => Ok((qb_bound(d, &s.policy, g, &features, dir)?, features.dim())),
            }
        })
        .collect();
    let mut table: Vec<[f64; 2]> = vec![[f64::NAN; 2]; cfg.gammas.len() * ests.len()];
    for (task, (r, &(g, k, dir))) in results.into_iter().zip(&tasks).enumerate() {
        match r {
            Ok((rep, dim)) => {
                let gi = cfg.gammas.iter().position(|x| *x == g).unwrap_or(0);
                table[gi * ests.len() + k][usize::from(dir == Direction::Upper)] = rep.value;
                col.rows.push(ResultRow::new(&rep, dim, task, Inference::default()));
            }
            Err(e) => col.fail(log, format!("{} {dir} at {g}", ests[k].0), e),
        }
    }
    let ipw_v = ipw(d, &s.policy).unwrap_or(f64::NAN);
    let hajek_v = hajek(d, &s.policy).unwrap_or(f64::NAN);
    let mut t = Table::new(&["gamma", "estimator", "lower", "upper", "ipw", "hajek"]);
    for (gi, g) in cfg.gammas.iter().enumerate() {
        for (k, (name, _)) in ests.iter().enumerate() {
            let [lo, hi] = table[gi * ests.len() + k];
            t.push(vec![g.to_string(), name.clone(), num(lo), num(hi), num(ipw_v), num(hajek_v)]);
        }
    }
    write_table(&cfg.out, "bounds_vs_gamma", &t)?;
    let mut series = Vec::new();
    for (k, (name, _)) in ests.iter().enumerate() {
        for (side, dashed) in [(0usize, false), (1, true)] {
            series.push(Series {
                name: format!("{name} {}", if side == 0 { "lower" } else { "upper" }),
                points: cfg.gammas.iter().enumerate().map(|(gi, g)| (*g, table[gi * ests.len() + k][side])).collect(),
                dashed,
                color: k,
            });
        }
    }
    series.push(Series {
        name: "ipw".into(),
        points: cfg.gammas.iter().map(|g| (*g, ipw_v)).collect(),
        dashed: false,
        color: 7,
    });
    write_chart(&cfg.out, "bounds_vs_gamma", line_chart("Policy value bounds", "Gamma", "value", &series, false))
}

fn f_sensitivity(cfg: &ExperimentConfig, s: &Setup, log: &mut RunLog, col: &mut Collector) -> Result<(), RunError> {
    let d = &s.data;
    let basis = build_basis(cfg, s, d, cfg.dim).map_err(fatal)?;
    let tasks: Vec<(usize, f64, Direction)> = (0..cfg.divergences.len())
        .flat_map(|k| cfg.gammas.iter().flat_map(move |&g| DIRECTIONS.map(|dir| (k, g, dir))))
        .collect();
    log.line(format!("{} bound computations", tasks.len()));
    let results: Vec<_> = tasks
        .par_iter()
        .map(|&(k, g, dir)| -> crisp_core::Result<(BoundReport, Result<Inference, String>)> {
            let model = SensitivityModel::f(cfg.divergences[k], g)?;
            let rep = kcmc_bound(d, &s.policy, &model, &basis, dir)?;
            let inf = infer(d, &rep, cfg);
            Ok((rep, inf))
        })
        .collect();
    let ng = cfg.gammas.len();
    let mut vals = vec![[f64::NAN; 4]; cfg.divergences.len() * ng];
    for (task, (r, &(k, g, dir))) in results.into_iter().zip(&tasks).enumerate() {
        let name = cfg.divergences[k].name();
        match r {
            Ok((rep, inf)) => {
                let inf = inf.unwrap_or_else(|e| {
                    log.line(format!("no interval for {name} {dir} at {g}: {e}"));
                    Inference::default()
                });
                let gi = cfg.gammas.iter().position(|x| *x == g).unwrap_or(0);
                let slot = &mut vals[k * ng + gi];
                match dir {
                    Direction::Lower => {
                        slot[0] = rep.value;
                        slot[2] = inf.ci.map_or(f64::NAN, |c| c.0);
                    }
                    Direction::Upper => {
                        slot[1] = rep.value;
                        slot[3] = inf.ci.map_or(f64::NAN, |c| c.1);
                    }
                }
                col.rows.push(ResultRow::new(&rep, basis.dim(), task, inf));
            }
            Err(e) => col.fail(log, format!("{name} {dir} at {g}"), e),
        }
    }
    let mut t = Table::new(&["divergence", "gamma", "lower", "upper", "lower_ci_lo", "upper_ci_hi"]);
    let mut series = Vec::new();
    for (k, div) in cfg.divergences.iter().enumerate() {
        for (gi, g) in cfg.gammas.iter().enumerate() {
            let v = vals[k * ng + gi];
            t.push(vec![div.name().to_string(), g.to_string(), num(v[0]), num(v[1]), num(v[2]), num(v[3])]);
        }
        for (side, dashed) in [(0usize, false), (1, true)] {
            series.push(Series {
                name: format!("{} {}", div.name(), if side == 0 { "lower" } else { "upper" }),
                points: cfg.gammas.iter().enumerate().map(|(gi, g)| (*g, vals[k * ng + gi][side])).collect(),
                dashed,
                color: k,
            });
        }
    }
    write_table(&cfg.out, "f_sensitivity", &t)?;
    write_chart(&cfg.out, "f_sensitivity", line_chart("f-divergence bounds", "gamma", "value", &series, false))
}

fn ci(cfg: &ExperimentConfig, s: &Setup, log: &mut RunLog, col: &mut Collector) -> Result<(), RunError> {
    let d = &s.data;
    let basis = build_basis(cfg, s, d, cfg.dim).map_err(fatal)?;
    let tasks: Vec<(f64, Direction)> = cfg.gammas.iter().flat_map(|&g| DIRECTIONS.map(|dir| (g, dir))).collect();
    let results: Vec<_> = tasks
        .par_iter()
        .map(|&(g, dir)| -> Result<(BoundReport, Inference), String> {
            let model = cfg.model_at(&cfg.model, g).map_err(|e| e.0)?;
            let rep = kcmc_bound(d, &s.policy, &model, &basis, dir).map_err(|e| e.to_string())?;
            let inf = infer(d, &rep, cfg)?;
            Ok((rep, inf))
        })
        .collect();
    let mut t = Table::new(&["gamma", "direction", "value", "gic", "ci_lo", "ci_hi", "ci_lo_corrected", "ci_hi_corrected"]);
    let mut pts: [Vec<(f64, f64)>; 6] = Default::default();
    for (task, (r, &(g, dir))) in results.into_iter().zip(&tasks).enumerate() {
        match r {
            Ok((rep, inf)) => {
                let (ci, cc, gv) = (inf.ci.unwrap(), inf.ci_corrected.unwrap(), inf.gic.unwrap());
                t.push(vec![
                    g.to_string(),
                    dir.to_string(),
                    num(rep.value),
                    num(gv),
                    num(ci.0),
                    num(ci.1),
                    num(cc.0),
                    num(cc.1),
                ]);
                let o = if dir == Direction::Lower { 0 } else { 3 };
                pts[o].push((g, rep.value));
                pts[o + 1].push((g, cc.0));
                pts[o + 2].push((g, cc.1));
                col.rows.push(ResultRow::new(&rep, basis.dim(), task, inf));
            }
            Err(e) => col.fail(log, format!("{dir} at {g}"), e),
        }
    }
    write_table(&cfg.out, "ci", &t)?;
    let names = ["lower", "lower CI lo", "lower CI hi", "upper", "upper CI lo", "upper CI hi"];
    let series: Vec<Series> = pts
        .into_iter()
        .zip(names)
        .enumerate()
        .map(|(k, (points, name))| Series { name: name.into(), points, dashed: k % 3 != 0, color: k / 3 })
        .collect();
    write_chart(&cfg.out, "ci", line_chart("Bounds with corrected intervals", "Gamma", "value", &series, false))
}

fn coverage(cfg: &ExperimentConfig, s: &Setup, log: &mut RunLog, col: &mut Collector) -> Result<(), RunError> {
    let truth = s.truth.as_ref().ok_or_else(|| RunError::Input("coverage needs synthetic data".into()))?;
    let model = cfg.model_at(&cfg.model, cfg.gamma).map_err(|e| RunError::Input(e.0))?;
    log.line(format!("{} replicates of n = {}", cfg.reps, cfg.n));
    let results: Vec<_> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| -> Result<(BoundReport, Inference, usize), String> {
            let d = truth.sample(cfg.n, rep_seed(cfg.seed, rep)).map_err(|e| e.to_string())?;
            let basis = build_basis(cfg, s, &d, cfg.dim).map_err(|e| e.to_string())?;
            let r = kcmc_bound(&d, &s.policy, &model, &basis, Direction::Lower).map_err(|e| e.to_string())?;
            let inf = infer(&d, &r, cfg)?;
            Ok((r, inf, basis.dim()))
        })
        .collect();
    let mut intervals = Vec::new();
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok((report, inf, dim)) => {
                intervals.push((inf.ci.unwrap(), inf.ci_corrected.unwrap()));
                col.rows.push(ResultRow::new(&report, dim, rep, inf));
            }
            Err(e) => col.fail(log, format!("replicate {rep}"), e),
        }
    }
    let m = intervals.len().max(1) as f64;
    let rate = |v: f64| -> (f64, f64) {
        let hit = |c: (f64, f64)| (c.0 <= v && v <= c.1) as usize as f64;
        (intervals.iter().map(|i| hit(i.0)).sum::<f64>() / m, intervals.iter().map(|i| hit(i.1)).sum::<f64>() / m)
    };
    let mut t = Table::new(&["null", "coverage_uncorrected", "coverage_corrected"]);
    let (mut pu, mut pc) = (Vec::new(), Vec::new());
    for &v in &cfg.nulls {
        let (u, c) = rate(v);
        t.push(vec![num(v), num(u), num(c)]);
        pu.push((v, u));
        pc.push((v, c));
    }
    write_table(&cfg.out, "coverage", &t)?;
    let tan = matches!(model, SensitivityModel::Box(b) if b.kind == BoxKind::Tan);
    if truth.action_kind == ActionKind::Binary && tan {
        let target = true_sharp_bound_mc(truth, &s.policy, cfg.gamma, Direction::Lower, cfg.n_mc, cfg.seed).map_err(fatal)?;
        let (u, c) = rate(target);
        let mut tt = Table::new(&["target", "coverage_uncorrected", "coverage_corrected", "replicates"]);
        tt.push(vec![num(target), num(u), num(c), intervals.len().to_string()]);
        write_table(&cfg.out, "coverage_truth", &tt)?;
        log.line(format!("sharp bound {target:.4}: acceptance {u:.3} uncorrected, {c:.3} corrected"));
    }
    let series = vec![
        Series { name: "uncorrected".into(), points: pu, dashed: true, color: 0 },
        Series { name: "corrected".into(), points: pc, dashed: false, color: 1 },
    ];
    write_chart(&cfg.out, "coverage", line_chart("Interval acceptance rate", "null value", "rate", &series, false))
}

fn model_select(cfg: &ExperimentConfig, s: &Setup, log: &mut RunLog, col: &mut Collector) -> Result<(), RunError> {
    let d = &s.data;
    let model = cfg.model_at(&cfg.model, cfg.gamma).map_err(|e| RunError::Input(e.0))?;
    let max_dim = *cfg.dims.iter().max().unwrap_or(&1);
    let full = build_basis(cfg, s, d, max_dim).map_err(fatal)?;
    let builder = |t: &Dataset, dim: usize| build_basis(cfg, s, t, dim);
    let results: Vec<_> = cfg
        .dims
        .par_iter()
        .map(|&dim| -> Result<(BoundReport, Inference, f64), String> {
            let b = full.prefix((dim + 1).min(full.dim())).map_err(|e| e.to_string())?;
            let r = kcmc_bound(d, &s.policy, &model, &b, Direction::Lower).map_err(|e| e.to_string())?;
            let inf = infer(d, &r, cfg)?;
            let cv = cross_validate(d, &s.policy, &model, &builder, dim, cfg.folds, cfg.seed, Direction::Lower)
                .map_err(|e| e.to_string())?;
            Ok((r, inf, cv))
        })
        .collect();
    let mut t = Table::new(&["dim", "raw", "gic", "cv"]);
    let (mut raw, mut ic, mut cv) = (Vec::new(), Vec::new(), Vec::new());
    for (task, (r, &dim)) in results.into_iter().zip(&cfg.dims).enumerate() {
        match r {
            Ok((rep, inf, c)) => {
                let g = inf.gic.unwrap();
                t.push(vec![dim.to_string(), num(rep.value), num(g), num(c)]);
                raw.push((dim as f64, rep.value));
                ic.push((dim as f64, g));
                cv.push((dim as f64, c));
                col.rows.push(ResultRow::new(&rep, dim, task, inf));
            }
            Err(e) => col.fail(log, format!("dimension {dim}"), e),
        }
    }
    let best = |v: &[(f64, f64)]| v.iter().copied().fold((f64::NAN, f64::NEG_INFINITY), |b, p| if p.1 > b.1 { p } else { b });
    let (gd, cd) = (best(&ic), best(&cv));
    log.line(format!("selected D = {} by GIC ({:.4}), D = {} by CV ({:.4})", gd.0, gd.1, cd.0, cd.1));
    write_table(&cfg.out, "model_select", &t)?;
    let series = vec![
        Series { name: "raw".into(), points: raw, dashed: false, color: 0 },
        Series { name: "GIC".into(), points: ic, dashed: false, color: 1 },
        Series { name: "CV".into(), points: cv, dashed: true, color: 2 },
    ];
    write_chart(&cfg.out, "model_select", line_chart("Lower bound by basis dimension", "D", "bound", &series, true))
}

fn policy_learn(cfg: &ExperimentConfig, s: &Setup, log: &mut RunLog, col: &mut Collector) -> Result<(), RunError> {
    let model = cfg.model_at(&cfg.model, cfg.gamma).map_err(|e| RunError::Input(e.0))?;
    let (train, test) = match (&cfg.data, &s.truth) {
        (DataSource::Csv { .. }, _) | (_, None) => {
            let n = s.data.len();
            if cfg.n_test >= n {
                return Err(RunError::Input(format!("n_test = {} leaves no training rows out of {n}", cfg.n_test)));
            }
            let cut = n - cfg.n_test;
            (s.data.subset(&(0..cut).collect::<Vec<_>>()), s.data.subset(&(cut..n).collect::<Vec<_>>()))
        }
        (_, Some(truth)) => (s.data.clone(), truth.sample(cfg.n_test, cfg.test_seed).map_err(fatal)?),
    };
    let btr = build_basis(cfg, s, &train, cfg.dim).map_err(fatal)?;
    let bte = build_basis(cfg, s, &test, cfg.dim).map_err(fatal)?;
    let p0 = zero_policy(train.action_kind(), train.context_dim());
    let inners: Vec<(String, InnerEstimator)> = cfg
        .inner
        .iter()
        .map(|e| (e.clone(), if e == "zsb" { InnerEstimator::Zsb } else { InnerEstimator::Kcmc }))
        .collect();
    log.line(format!("{} steps at learning rate {} for {}", cfg.steps, cfg.lr, cfg.inner.join(", ")));
    let results: Vec<_> = inners
        .par_iter()
        .map(|(_, inner)| {
            let opts = LearnOptions {
                steps: cfg.steps,
                learning_rate: cfg.lr,
                inner: *inner,
                backtracking: cfg.backtracking,
                ..Default::default()
            };
            let res = learn_policy_maxmin(&train, &model, &btr, &p0, &opts, Some(TestSet { data: &test, basis: &bte }))?;
            let rep = kcmc_bound(&test, &res.policy, &model, &bte, Direction::Lower)?;
            Ok::<_, crisp_core::CrispError>((res, rep))
        })
        .collect();
    let k = p0.params().len();
    let mut header: Vec<String> = vec!["inner".into(), "step".into()];
    header.extend((0..k).map(|j| format!("beta_{j}")));
    header.extend(["train_bound", "test_bound", "skipped"].map(String::from));
    let mut t = Table { header, rows: Vec::new() };
    let mut series = Vec::new();
    for (task, ((name, _), r)) in inners.iter().zip(results).enumerate() {
        match r {
            Ok((res, rep)) => {
                for st in &res.trajectory {
                    let mut row = vec![name.clone(), st.step.to_string()];
                    row.extend(st.params.iter().map(|v| num(*v)));
                    row.push(num(st.train_bound));
                    row.push(st.test_bound.map(num).unwrap_or_default());
                    row.push(st.skipped.to_string());
                    t.rows.push(row);
                }
                let (first, last) = (&res.trajectory[0], &res.trajectory[res.trajectory.len() - 1]);
                log.line(format!(
                    "{name}: train {:.4} -> {:.4}, test KCMC bound {:.4}",
                    first.train_bound, last.train_bound, rep.value
                ));
                let pts = |f: &dyn Fn(&crisp_core::LearnStep) -> f64| -> Vec<(f64, f64)> {
                    res.trajectory.iter().map(|st| (st.step as f64, f(st))).collect()
                };
                series.push(Series { name: format!("{name} train"), points: pts(&|st| st.train_bound), dashed: true, color: task });
                series.push(Series {
                    name: format!("{name} test"),
                    points: pts(&|st| st.test_bound.unwrap_or(f64::NAN)),
                    dashed: false,
                    color: task,
                });
                col.rows.push(ResultRow::new(&rep, bte.dim(), task, Inference::default()));
            }
            Err(e) => col.fail(log, format!("learning with {name}"), e),
        }
    }
    write_table(&cfg.out, "policy_learn", &t)?;
    write_chart(&cfg.out, "policy_learn", line_chart("Max-min policy learning", "step", "lower bound", &series, false))
}
