//! Acceptance run: one line per criterion. Criteria listed in `EXPECTED_FAIL`
//! are reported but only fail the run when `CRISP_ACCEPTANCE_STRICT=1`.

mod common;

use std::time::{Duration, Instant};

use common::*;
use crisp_core::asymptotics::{box_hessian_population, f_hessian};
use crisp_core::dualsolve::DualProblem;
use crisp_core::estimators::exact_quantile_basis;
use crisp_core::sensitivity::{oracle_conjugate, Generator, OracleGrid};
use crisp_core::stats::normal_pdf;
use crisp_core::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const EXPECTED_FAIL: &[usize] = &[10];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn c1_no_confounding() -> Outcome {
    let (d, truth) = generate_binary_synthetic(1000, 0).unwrap();
    let pol = Policy::evaluation_logistic();
    let target = ipw(&d, &pol).unwrap();
    let kp = kpca_for(&d, 20);
    let feats = arm_linear_for(&d, &truth, &pol);
    let m = SensitivityModel::tan(1.0);
    let bm = BoxModel::tan(1.0);
    let mut worst = 0.0f64;
    for dir in [Direction::Lower, Direction::Upper] {
        for v in [
            kcmc_bound(&d, &pol, &m, &kp, dir).unwrap().value,
            zsb_bound(&d, &pol, &bm, dir).unwrap().value,
            qb_bound(&d, &pol, 1.0, &feats, dir).unwrap().value,
        ] {
            worst = worst.max((v - target).abs());
        }
    }
    outcome(worst <= 1e-4, format!("max |bound - IPW| = {worst:.2e}"))
}

fn c2_vertex_oracle() -> Outcome {
    let pol = Policy::evaluation_logistic();
    let mut worst = 0.0f64;
    for k in 0..50usize {
        let n = 6 + k % 7;
        let gamma = [1.5, 2.0, 3.0][k % 3];
        let d = small_dataset(n, 100 + k as u64);
        let basis = random_basis(n, k % 2, k as u64);
        let r = rewards(&d, &pol);
        let (a, b) = tan_bounds(&d, gamma);
        let c = col_means(basis.psi());
        let v = kcmc_bound(&d, &pol, &SensitivityModel::tan(gamma), &basis, Direction::Lower).unwrap().value;
        let o = lp_vertex_min(&r, basis.psi(), &a, &b, &c).unwrap();
        worst = worst.max((v - o).abs());
    }
    outcome(worst <= 1e-6, format!("50 instances, max gap {worst:.2e}"))
}

fn c3_ordering() -> Outcome {
    let (d, truth) = generate_binary_synthetic(1000, 0).unwrap();
    let pol = Policy::evaluation_logistic();
    let feats = arm_linear_for(&d, &truth, &pol);
    let mut ok = true;
    let mut detail = Vec::new();
    for gamma in [1.5, 2.0, 3.0, 5.0] {
        let m = SensitivityModel::tan(gamma);
        let bm = BoxModel::tan(gamma);
        let z = [zsb_bound(&d, &pol, &bm, Direction::Lower).unwrap().value, zsb_bound(&d, &pol, &bm, Direction::Upper).unwrap().value];
        let q = [
            qb_bound(&d, &pol, gamma, &feats, Direction::Lower).unwrap().value,
            qb_bound(&d, &pol, gamma, &feats, Direction::Upper).unwrap().value,
        ];
        let k = [kcmc_bound(&d, &pol, &m, &feats, Direction::Lower).unwrap().value, kcmc_bound(&d, &pol, &m, &feats, Direction::Upper).unwrap().value];
        let lower_ok = z[0] <= q[0] && q[0] <= k[0] + 1e-6;
        let upper_ok = z[1] >= q[1] && q[1] >= k[1] - 1e-6;
        ok &= lower_ok && upper_ok;
        detail.push(format!("G={gamma}: {:.3}<={:.3}<={:.3} / {:.3}>={:.3}>={:.3}", z[0], q[0], k[0], z[1], q[1], k[1]));
    }
    outcome(ok, detail.join("; "))
}

fn c4_oracle_consistency() -> Outcome {
    let (d, truth) = generate_binary_synthetic(20_000, 0).unwrap();
    let pol = Policy::evaluation_logistic();
    let basis = arm_linear_for(&d, &truth, &pol);
    let v = kcmc_bound(&d, &pol, &SensitivityModel::tan(1.5), &basis, Direction::Lower).unwrap().value;
    let t = true_sharp_bound_mc(&truth, &pol, 1.5, Direction::Lower, 1_000_000, 0).unwrap();
    outcome((v - t).abs() <= 0.05, format!("KCMC {v:.4} vs oracle {t:.4}"))
}

fn conjugate_grid(g: &Generator) -> Vec<f64> {
    let (lo, hi) = match g {
        Generator::Box { .. } => (-5.0, 5.0),
        Generator::Divergence(Divergence::Kl) => (-5.0, 3.0),
        Generator::Divergence(Divergence::ReverseKl) => (-5.0, -0.05),
        Generator::Divergence(Divergence::SquaredHellinger) => (-5.0, 0.8),
        Generator::Divergence(Divergence::PearsonChi2) => (-5.0, 5.0),
        Generator::Divergence(Divergence::NeymanChi2) => (-5.0, 0.9),
        Generator::Divergence(Divergence::TotalVariation) => (-3.0, 0.5),
    };
    (0..200).map(|k| lo + (hi - lo) * k as f64 / 199.0).collect()
}

fn c5_conjugates() -> Outcome {
    let mut gens = vec![Generator::Box { a: 0.6, b: 1.75 }];
    gens.extend(Divergence::ALL.iter().map(|d| Generator::Divergence(*d)));
    let grid = OracleGrid::default();
    let mut worst = 0.0f64;
    for g in &gens {
        for v in conjugate_grid(g) {
            let (o, _) = oracle_conjugate(g, v, &grid);
            worst = worst.max((g.conjugate(v).value - o).abs());
        }
    }
    outcome(worst <= 1e-6, format!("7 models x 200 points, max gap {worst:.2e}"))
}

fn rand_problem(rng: &mut ChaCha20Rng, model: LossModel, n: usize, dim: usize) -> DualProblem {
    let r = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
    let psi = DMatrix::from_fn(n, dim, |_, j| if j == 0 { 1.0 } else { rng.gen_range(-1.0..1.0) });
    DualProblem::new(r, psi, model, Direction::Lower).unwrap()
}

fn c6_derivatives() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let n = 40;
    let mut models = vec![LossModel::Box { a: DVector::from_element(n, 0.6), b: DVector::from_element(n, 1.8) }];
    models.extend(Divergence::ALL.iter().map(|d| LossModel::F { divergence: *d, gamma: 0.1 }));

    // per-sample subgradients against central differences
    let mut sub_worst = 0.0f64;
    for model in &models {
        let prob = rand_problem(&mut rng, model.clone(), n, 3);
        let mut checked = 0;
        while checked < 100 {
            let theta = DualParams {
                eta_f: if prob.is_box() { 0.0 } else { rng.gen_range(0.5..4.0) },
                eta: DVector::from_fn(3, |j, _| if j == 0 { rng.gen_range(-6.0..0.0) } else { rng.gen_range(-1.0..1.0) }),
            };
            let i = rng.gen_range(0..n);
            let l = prob.sample_loss(&theta, i);
            if !l.value.is_finite() || l.slope_lo != l.slope_hi {
                continue;
            }
            let g = prob.sample_subgradient(&theta, i, &l, l.slope_lo);
            let h = 1e-6;
            let mut err = 0.0f64;
            for k in 0..g.len() {
                let (mut tp, mut tm) = (theta.clone(), theta.clone());
                if prob.is_box() || k > 0 {
                    let j = if prob.is_box() { k } else { k - 1 };
                    tp.eta[j] += h;
                    tm.eta[j] -= h;
                } else {
                    tp.eta_f += h;
                    tm.eta_f -= h;
                }
                let fd = (prob.sample_loss(&tp, i).value - prob.sample_loss(&tm, i).value) / (2.0 * h);
                err = err.max((fd - g[k]).abs() / g[k].abs().max(1.0));
            }
            sub_worst = sub_worst.max(err);
            checked += 1;
        }
    }

    // analytic f-path Hessian at the solution against differences of the mean gradient
    let (d, _) = generate_binary_synthetic(500, 3).unwrap();
    let pol = Policy::evaluation_logistic();
    let basis = kpca_for(&d, 3);
    let mut hess_worst = 0.0f64;
    for div in [Divergence::Kl, Divergence::ReverseKl, Divergence::SquaredHellinger, Divergence::PearsonChi2, Divergence::NeymanChi2] {
        let rep = kcmc_bound(&d, &pol, &SensitivityModel::f(div, 0.05).unwrap(), &basis, Direction::Lower).unwrap();
        let prob = &rep.problem;
        let theta = &rep.dual;
        let hess = f_hessian(prob, theta).unwrap();
        let grad = |t: &DualParams| -> DVector<f64> {
            let mut g = DVector::zeros(prob.dim() + 1);
            for i in 0..prob.len() {
                let l = prob.sample_loss(t, i);
                g += prob.sample_subgradient(t, i, &l, l.slope_lo);
            }
            g / prob.len() as f64
        };
        let k = prob.dim() + 1;
        let mut fd = DMatrix::zeros(k, k);
        for c in 0..k {
            let h = 1e-5 * if c == 0 { theta.eta_f } else { 1.0 };
            let (mut tp, mut tm) = (theta.clone(), theta.clone());
            if c == 0 {
                tp.eta_f += h;
                tm.eta_f -= h;
            } else {
                tp.eta[c - 1] += h;
                tm.eta[c - 1] -= h;
            }
            fd.set_column(c, &((grad(&tp) - grad(&tm)) / (2.0 * h)));
        }
        hess_worst = hess_worst.max((&hess - &fd).norm() / fd.norm());
    }

    // box Hessian in the D = 1 Gaussian model against the population objective
    let (mu, sigma, n_mc) = (0.3, 1.2, 1_000_000);
    let mut g = ChaCha20Rng::seed_from_u64(66);
    let r: Vec<f64> = (0..n_mc).map(|_| mu + sigma * g.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let objective = |eta: f64| -> f64 { -eta + 2.0 * r.iter().map(|ri| (eta - ri).max(0.0)).sum::<f64>() / n_mc as f64 };
    let mut box_worst = 0.0f64;
    for eta in [-0.5, 0.3, 1.0] {
        let h = 0.05;
        let fd = (objective(eta + h) - 2.0 * objective(eta) + objective(eta - h)) / (h * h);
        let m = 200;
        let psi = DMatrix::from_element(m, 1, 1.0);
        let dens = vec![normal_pdf((eta - mu) / sigma) / sigma; m];
        let v = box_hessian_population(&psi, &DVector::zeros(m), &DVector::from_element(m, 2.0), &dens)[(0, 0)];
        box_worst = box_worst.max((v - fd).abs() / fd);
    }
    let pass = sub_worst <= 1e-5 && hess_worst <= 1e-4 && box_worst <= 0.05;
    outcome(pass, format!("subgradient {sub_worst:.1e}, f-Hessian {hess_worst:.1e}, box Hessian {:.1}%", 100.0 * box_worst))
}

fn c7_coverage() -> Outcome {
    let truth = SyntheticTruth::binary();
    let pol = Policy::evaluation_logistic();
    let target = true_sharp_bound_mc(&truth, &pol, 1.5, Direction::Lower, 1_000_000, 0).unwrap();
    let nulls: Vec<f64> = (0..=120).map(|k| 2.9 + 0.01 * k as f64).collect();
    let mut hits = [vec![0usize; nulls.len()], vec![0usize; nulls.len()]];
    let mut at_truth = 0usize;
    let reps = 200;
    for rep in 0..reps {
        let d = truth.sample(500, 1000 + rep as u64).unwrap();
        let basis = arm_linear_for(&d, &truth, &pol);
        let report = kcmc_bound(&d, &pol, &SensitivityModel::tan(1.5), &basis, Direction::Lower).unwrap();
        let s = sandwich(&d, &report, &SandwichOptions::default()).unwrap();
        for (c, corrected) in [false, true].into_iter().enumerate() {
            let (lo, hi) = confidence_interval(&report, &s, 0.05, corrected).unwrap();
            for (k, v) in nulls.iter().enumerate() {
                if lo <= *v && *v <= hi {
                    hits[c][k] += 1;
                }
            }
            if corrected && lo <= target && target <= hi {
                at_truth += 1;
            }
        }
    }
    let peak = |h: &[usize]| -> f64 {
        let best = *h.iter().max().unwrap();
        let at: Vec<f64> = nulls.iter().zip(h).filter(|(_, c)| **c == best).map(|(v, _)| *v).collect();
        at.iter().sum::<f64>() / at.len() as f64
    };
    let rate = at_truth as f64 / reps as f64;
    let (pu, pc) = (peak(&hits[0]), peak(&hits[1]));
    // the correction moves the acceptance peak towards pessimism, i.e. lower nulls for a lower bound
    let pass = (0.90..=0.99).contains(&rate) && pc <= pu;
    outcome(pass, format!("corrected acceptance at truth {rate:.3}; peaks corrected {pc:.3}, uncorrected {pu:.3}"))
}

fn c8_model_selection() -> Outcome {
    let (d, _) = generate_binary_synthetic(1000, 0).unwrap();
    let pol = Policy::evaluation_logistic();
    let m = SensitivityModel::tan(1.5);
    let full = kpca_for(&d, 256);
    let dims = [1usize, 2, 4, 8, 16, 32, 64, 128, 256];
    let builder = |t: &Dataset, dim: usize| -> Result<ConstraintBasis> { Ok(kpca_for(t, dim)) };
    let (mut raw, mut ic, mut cv) = (vec![], vec![], vec![]);
    for &dim in &dims {
        let rep = kcmc_bound(&d, &pol, &m, &full.prefix(dim + 1).unwrap(), Direction::Lower).unwrap();
        let s = sandwich(&d, &rep, &SandwichOptions::default()).unwrap();
        raw.push(rep.value);
        ic.push(gic(&rep, &s));
        cv.push(cross_validate(&d, &pol, &m, &builder, dim, 10, 0, Direction::Lower).unwrap());
    }
    let monotone = raw.windows(2).all(|w| w[1] >= w[0] - 1e-8);
    let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
    let last = dims.len() - 1;
    let (gi, ci) = (argmax(&ic), argmax(&cv));
    let pass = monotone && gi < last && ci < last && ic[last] < raw[last] && cv[last] < raw[last];
    outcome(
        pass,
        format!(
            "raw monotone {monotone}; GIC peak D={} ({:.4}), CV peak D={} ({:.4}); at D=256 raw {:.4}, GIC {:.4}, CV {:.4}",
            dims[gi], ic[gi], dims[ci], cv[ci], raw[last], ic[last], cv[last]
        ),
    )
}

fn c9_f_sensitivity() -> Outcome {
    let (d, _) = generate_binary_synthetic(4000, 0).unwrap();
    let pol = Policy::evaluation_logistic();
    let basis = kpca_for(&d, 20);
    let target = ipw(&d, &pol).unwrap();
    let mut ok = true;
    let mut worst_limit = 0.0f64;
    for div in Divergence::ALL {
        let (mut lp, mut up) = (f64::INFINITY, f64::NEG_INFINITY);
        for g in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let m = SensitivityModel::f(div, g).unwrap();
            let lo = kcmc_bound(&d, &pol, &m, &basis, Direction::Lower).unwrap().value;
            let hi = kcmc_bound(&d, &pol, &m, &basis, Direction::Upper).unwrap().value;
            ok &= lo <= lp + 1e-8 && hi >= up - 1e-8;
            lp = lo;
            up = hi;
        }
        let m = SensitivityModel::f(div, 1e-10).unwrap();
        for dir in [Direction::Lower, Direction::Upper] {
            let v = kcmc_bound(&d, &pol, &m, &basis, dir).unwrap().value;
            worst_limit = worst_limit.max((v - target).abs());
        }
    }
    outcome(ok && worst_limit <= 1e-3, format!("monotone {ok}; max |bound - IPW| at gamma=1e-10: {worst_limit:.1e}"))
}

fn c10_policy_learning() -> Outcome {
    let (tr, _) = generate_binary_synthetic(1000, 0).unwrap();
    let (te, _) = generate_binary_synthetic(1000, 1).unwrap();
    let (btr, bte) = (kpca_for(&tr, 20), kpca_for(&te, 20));
    let model = SensitivityModel::tan(1.5);
    let p0 = Policy::Logistic { beta: vec![0.0; 5] };
    let run = |inner| {
        let opts = LearnOptions { inner, ..Default::default() };
        learn_policy_maxmin(&tr, &model, &btr, &p0, &opts, Some(TestSet { data: &te, basis: &bte })).unwrap()
    };
    let k = run(InnerEstimator::Kcmc);
    let z = run(InnerEstimator::Zsb);
    let (k0, k1) = (k.trajectory[0].train_bound, k.trajectory[100].train_bound);
    let kt = k.trajectory[100].test_bound.unwrap();
    let zt = z.trajectory[100].test_bound.unwrap();
    let pass = k1 > k0 && kt >= zt - 1e-3;
    outcome(pass, format!("train {k0:.4} -> {k1:.4}; test KCMC-trained {kt:.4} vs ZSB-trained {zt:.4}"))
}

fn c11_specification() -> Outcome {
    let truth = SyntheticTruth::binary();
    let pol = Policy::evaluation_logistic();
    let exact = exact_quantile_basis(&truth, &pol, 1.5);
    let r0 = specification_residual(&truth, &pol, 1.5, &exact, 2000, 4).unwrap();
    let mut res = vec![];
    for dim in [1usize, 2, 4, 8, 16, 32, 64] {
        let b = move |d: &Dataset| kpca_for(d, 64).prefix(dim + 1);
        res.push(specification_residual(&truth, &pol, 1.5, &b, 1000, 4).unwrap());
    }
    let nested = res.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    outcome(r0 <= 1e-8 && nested, format!("exact-quantile residual {r0:.1e}; KPCA residuals {:.3} -> {:.3}", res[0], res[res.len() - 1]))
}

type Criterion = (usize, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "no-confounding collapse", Duration::from_secs(5), c1_no_confounding),
        (2, "small-instance exactness", Duration::from_secs(30), c2_vertex_oracle),
        (3, "sharpness ordering", Duration::from_secs(30), c3_ordering),
        (4, "oracle consistency", Duration::from_secs(120), c4_oracle_consistency),
        (5, "conjugate certification", Duration::from_secs(5), c5_conjugates),
        (6, "gradient and Hessian checks", Duration::from_secs(60), c6_derivatives),
        (7, "coverage", Duration::from_secs(600), c7_coverage),
        (8, "model selection", Duration::from_secs(300), c8_model_selection),
        (9, "f-sensitivity behaviour", Duration::from_secs(300), c9_f_sensitivity),
        (10, "policy learning", Duration::from_secs(600), c10_policy_learning),
        (11, "specification diagnostic", Duration::from_secs(60), c11_specification),
    ];
    let only: Option<usize> = std::env::var("CRISP_ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let strict = std::env::var("CRISP_ACCEPTANCE_STRICT").map(|v| v == "1").unwrap_or(false);
    let mut failed = Vec::new();
    for (id, name, limit, run) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let took = start.elapsed();
        let pass = out.pass && took <= limit;
        let tag = match (pass, EXPECTED_FAIL.contains(&id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (expected)",
            (false, false) => "FAIL",
        };
        println!("criterion {id:>2} {name}: {tag} [{:.1}s / {}s] {}", took.as_secs_f64(), limit.as_secs(), out.detail);
        if !pass && (strict || !EXPECTED_FAIL.contains(&id)) {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
