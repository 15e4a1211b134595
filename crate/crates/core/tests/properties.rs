mod common;

use common::*;
use crisp_core::dualsolve::DualProblem;
use crisp_core::policy::project_simplex;
use crisp_core::sensitivity::{box_bounds, Generator};
use crisp_core::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn generators(a: f64, b: f64) -> Vec<Generator> {
    let mut g = vec![Generator::Box { a, b }];
    g.extend(Divergence::ALL.iter().map(|d| Generator::Divergence(*d)));
    g
}

fn small_problem(n: usize, dim: usize, seed: u64, model: LossModel, direction: Direction) -> DualProblem {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let r = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
    let psi = DMatrix::from_fn(n, dim, |_, j| if j == 0 { 1.0 } else { rng.gen_range(-1.0..1.0) });
    DualProblem::new(r, psi, model, direction).unwrap()
}

fn tan_model(n: usize, gamma: f64) -> LossModel {
    let (a, b) = BoxModel::tan(gamma).bounds(0.4).unwrap();
    LossModel::Box { a: DVector::from_element(n, a), b: DVector::from_element(n, b) }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn fenchel_young(u in 0.0f64..20.0, v in -10.0f64..10.0, a in 0.05f64..1.0, b in 1.0f64..8.0) {
        for g in generators(a, b) {
            let fu = g.f(u);
            if !fu.is_finite() {
                continue;
            }
            let c = g.conjugate(v);
            prop_assert!(c.value >= u * v - fu - 1e-9, "{g:?} u={u} v={v}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn conjugate_subgradient_is_monotone(v1 in -10.0f64..10.0, dv in 1e-6f64..5.0, a in 0.05f64..1.0, b in 1.0f64..8.0) {
        let v2 = v1 + dv;
        for g in generators(a, b) {
            let (c1, c2) = (g.conjugate(v1), g.conjugate(v2));
            if c1.is_finite() && c2.is_finite() && !c1.is_empty() && !c2.is_empty() {
                prop_assert!(c1.lo <= c1.hi && c1.hi <= c2.lo + 1e-12, "{g:?} at {v1}, {v2}");
            }
        }
    }

    #[test]
    fn tan_box_brackets_one(gamma in 1.0f64..50.0, p in 1e-6f64..=1.0) {
        for kind in [BoxKind::Tan, BoxKind::Ratio] {
            let (a, b) = box_bounds(kind, gamma, p).unwrap();
            prop_assert!((0.0..=1.0 + 1e-15).contains(&a) && 1.0 - 1e-15 <= b);
        }
    }

    #[test]
    fn simplex_projection_is_feasible(v in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let w = project_simplex(&v);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|x| *x >= 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_is_psd(n in 2usize..40, p in 1usize..4, bw in 0.1f64..5.0, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let pts = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-3.0..3.0));
        let k = gram_matrix(&KernelSpec::rbf(bw).unwrap(), &pts).unwrap();
        let ev = k.symmetric_eigenvalues();
        prop_assert!(ev.min() >= -1e-8 * ev.max());
        prop_assert_eq!(k.clone(), k.transpose());
    }

    #[test]
    fn upper_is_negated_lower(seed in any::<u64>(), n in 5usize..40, gamma in 1.0f64..4.0) {
        let base = small_problem(n, 2, seed, tan_model(n, gamma), Direction::Lower);
        let up = DualProblem::new(base.r().clone(), base.psi().clone(), tan_model(n, gamma), Direction::Upper).unwrap();
        let lo = DualProblem::new(-base.r(), base.psi().clone(), tan_model(n, gamma), Direction::Lower).unwrap();
        let o = SolverOptions::default();
        let su = solve_dual(&up, &o, None).unwrap();
        let sl = solve_dual(&lo, &o, None).unwrap();
        prop_assert_eq!(up.bound_from_objective(su.objective), -lo.bound_from_objective(sl.objective));
    }

    #[test]
    fn subgradient_certificate(seed in any::<u64>(), which in 0usize..7, scale in 0.1f64..3.0) {
        use rand::{Rng, SeedableRng};
        let n = 12;
        let model = if which == 0 {
            tan_model(n, 2.0)
        } else {
            LossModel::F { divergence: Divergence::ALL[which - 1], gamma: 0.1 }
        };
        let prob = small_problem(n, 2, seed, model, Direction::Lower);
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed.wrapping_add(1));
        let mut draw = || DualParams {
            eta_f: if prob.is_box() { 0.0 } else { rng.gen_range(0.2..3.0) * scale },
            eta: DVector::from_fn(2, |_, _| rng.gen_range(-4.0..4.0)),
        };
        let (t0, t1) = (draw(), draw());
        for i in 0..n {
            let l0 = prob.sample_loss(&t0, i);
            let l1 = prob.sample_loss(&t1, i);
            if !l0.value.is_finite() || !l1.value.is_finite() || l0.slope_lo > l0.slope_hi {
                continue;
            }
            let g = prob.sample_subgradient(&t0, i, &l0, l0.slope_lo);
            let mut step = DVector::zeros(g.len());
            let off = if prob.is_box() { 0 } else { step[0] = t1.eta_f - t0.eta_f; 1 };
            for k in 0..2 {
                step[off + k] = t1.eta[k] - t0.eta[k];
            }
            prop_assert!(l1.value >= l0.value + g.dot(&step) - 1e-9 * (1.0 + l0.value.abs()));
        }
    }

    #[test]
    fn f_objective_convex_on_segments(seed in any::<u64>(), which in 0usize..6, s in 0.0f64..1.0) {
        use rand::{Rng, SeedableRng};
        let n = 20;
        let model = LossModel::F { divergence: Divergence::ALL[which], gamma: 0.05 };
        let prob = small_problem(n, 2, seed, model, Direction::Lower);
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed ^ 5);
        let mut draw = || DualParams { eta_f: rng.gen_range(0.5..5.0), eta: DVector::from_fn(2, |j, _| if j == 0 { rng.gen_range(4.0..8.0) } else { rng.gen_range(-0.5..0.5) }) };
        let (t0, t1) = (draw(), draw());
        let mid = DualParams { eta_f: (1.0 - s) * t0.eta_f + s * t1.eta_f, eta: &t0.eta * (1.0 - s) + &t1.eta * s };
        let (l0, l1, lm) = (prob.mean_loss(&t0), prob.mean_loss(&t1), prob.mean_loss(&mid));
        if l0.is_finite() && l1.is_finite() {
            prop_assert!(lm <= (1.0 - s) * l0 + s * l1 + 1e-10 * (1.0 + l0.abs().max(l1.abs())));
        }
    }

    #[test]
    fn weak_duality(seed in any::<u64>(), n in 6usize..40, gamma in 1.1f64..4.0) {
        let prob = small_problem(n, 2, seed, tan_model(n, gamma), Direction::Lower);
        let sol = solve_dual(&prob, &SolverOptions::default(), None).unwrap();
        let w = crisp_core::dualsolve::recover_primal_weights(&sol.params, &prob, 1e-9);
        let bound = prob.bound_from_objective(sol.objective);
        prop_assert!(prob.primal_value(&w.weights) >= bound - 1e-6);
    }

    #[test]
    fn nested_columns_tighten(seed in any::<u64>(), n in 10usize..60, gamma in 1.1f64..4.0) {
        let full = small_problem(n, 4, seed, tan_model(n, gamma), Direction::Lower);
        let o = SolverOptions::default();
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=4 {
            let cols: Vec<usize> = (0..k).collect();
            let p = DualProblem::new(full.r().clone(), full.psi().select_columns(&cols), tan_model(n, gamma), Direction::Lower).unwrap();
            let v = p.bound_from_objective(solve_dual(&p, &o, None).unwrap().objective);
            prop_assert!(v >= prev - 1e-8, "D={k}: {v} < {prev}");
            prev = v;
        }
    }

    #[test]
    fn hajek_scale_invariant(seed in 0u64..1000, c in 0.1f64..10.0) {
        let d = small_dataset(15, seed);
        let pol = Policy::evaluation_logistic();
        let h = hajek(&d, &pol).unwrap();
        // scaling 1/p by c is the same as scaling p by 1/c
        let scaled = d.with_propensities(d.propensities().unwrap() / c).unwrap();
        let h2 = hajek(&scaled, &pol).unwrap();
        prop_assert!((h - h2).abs() <= 1e-12 * (1.0 + h.abs()));
    }

    #[test]
    fn generators_are_pure(n in 1usize..50, seed in any::<u64>()) {
        let (a, _) = generate_binary_synthetic(n, seed).unwrap();
        let (b, _) = generate_binary_synthetic(n, seed).unwrap();
        prop_assert_eq!(a, b);
        let (c, _) = generate_continuous_synthetic(n, seed).unwrap();
        let (e, _) = generate_continuous_synthetic(n, seed).unwrap();
        prop_assert_eq!(c, e);
    }

    #[test]
    fn csv_roundtrip(n in 1usize..30, seed in any::<u64>()) {
        let (d, _) = generate_binary_synthetic(n, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&d, &path).unwrap();
        let back = load_csv(&path, &CsvSchema::new(ActionKind::Binary)).unwrap();
        prop_assert_eq!(d, back);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn estimators_monotone_in_gamma(seed in 0u64..10_000) {
        let (d, truth) = generate_binary_synthetic(300, seed).unwrap();
        let pol = Policy::evaluation_logistic();
        let feats = arm_linear_for(&d, &truth, &pol);
        let kp = kpca_for(&d, 8);
        let mut prev: Option<([f64; 6], bool)> = None;
        for gamma in [1.0, 1.5, 2.0, 3.0, 5.0] {
            let m = SensitivityModel::tan(gamma);
            let bm = BoxModel::tan(gamma);
            let zl = zsb_bound(&d, &pol, &bm, Direction::Lower).unwrap();
            let zu = zsb_bound(&d, &pol, &bm, Direction::Upper).unwrap();
            // the slack face is not nested in Gamma, so ZSB is compared only where feasible
            let feasible = zl.diagnostics.slack == Some(0.0) && zu.diagnostics.slack == Some(0.0);
            let cur = [
                kcmc_bound(&d, &pol, &m, &kp, Direction::Lower).unwrap().value,
                kcmc_bound(&d, &pol, &m, &kp, Direction::Upper).unwrap().value,
                zl.value,
                zu.value,
                qb_bound(&d, &pol, gamma, &feats, Direction::Lower).unwrap().value,
                qb_bound(&d, &pol, gamma, &feats, Direction::Upper).unwrap().value,
            ];
            for k in 0..3 {
                prop_assert!(cur[2 * k] <= cur[2 * k + 1] + 1e-8);
            }
            if let Some((p, was_feasible)) = prev {
                for k in 0..3 {
                    if k == 1 && !(feasible && was_feasible) {
                        continue;
                    }
                    prop_assert!(cur[2 * k] <= p[2 * k] + 1e-8, "lower rose at {gamma}");
                    prop_assert!(cur[2 * k + 1] >= p[2 * k + 1] - 1e-8, "upper fell at {gamma}");
                }
            }
            prev = Some((cur, feasible));
        }
    }

    #[test]
    fn f_bounds_monotone_in_gamma(seed in 0u64..10_000, which in 0usize..6) {
        let (d, _) = generate_binary_synthetic(300, seed).unwrap();
        let pol = Policy::evaluation_logistic();
        let basis = ConstraintBasis::constant(d.len());
        let div = Divergence::ALL[which];
        let (mut lo_prev, mut up_prev) = (f64::INFINITY, f64::NEG_INFINITY);
        for g in [0.01, 0.05, 0.2] {
            let m = SensitivityModel::f(div, g).unwrap();
            let lo = kcmc_bound(&d, &pol, &m, &basis, Direction::Lower).unwrap().value;
            let up = kcmc_bound(&d, &pol, &m, &basis, Direction::Upper).unwrap().value;
            prop_assert!(lo <= up + 1e-8);
            prop_assert!(lo <= lo_prev + 1e-6 && up >= up_prev - 1e-6, "{div:?} at {g}");
            lo_prev = lo;
            up_prev = up;
        }
    }

    #[test]
    fn sandwich_pieces(seed in 0u64..10_000, gamma in 1.2f64..3.0) {
        let (d, _) = generate_binary_synthetic(400, seed).unwrap();
        let pol = Policy::evaluation_logistic();
        let basis = kpca_for(&d, 6);
        let rep = kcmc_bound(&d, &pol, &SensitivityModel::tan(gamma), &basis, Direction::Lower).unwrap();
        let s = sandwich(&d, &rep, &SandwichOptions::default()).unwrap();
        let ev = s.j.clone().symmetric_eigenvalues();
        prop_assert!(ev.min() >= -1e-10);
        prop_assert_eq!(s.v.clone(), s.v.transpose());
        let (l0, h0) = confidence_interval(&rep, &s, 0.05, false).unwrap();
        let (l1, h1) = confidence_interval(&rep, &s, 0.05, true).unwrap();
        prop_assert!(((h0 - l0) - (h1 - l1)).abs() <= 1e-12);
        prop_assert!((l1 + h1) / 2.0 <= (l0 + h0) / 2.0 + 1e-12);
        prop_assert!(gic(&rep, &s) <= rep.value);
    }

    #[test]
    fn kcmc_nested_kpca_monotone(seed in 0u64..10_000) {
        let (d, _) = generate_binary_synthetic(300, seed).unwrap();
        let pol = Policy::evaluation_logistic();
        let full = kpca_for(&d, 16);
        let m = SensitivityModel::tan(2.0);
        let mut prev = f64::NEG_INFINITY;
        for k in [1usize, 2, 4, 8, 16] {
            let v = kcmc_bound(&d, &pol, &m, &full.prefix(k + 1).unwrap(), Direction::Lower).unwrap().value;
            prop_assert!(v >= prev - 1e-8, "D={k}");
            prev = v;
        }
    }

    #[test]
    fn logistic_normalised_along_learning(seed in 0u64..10_000) {
        let (d, _) = generate_binary_synthetic(200, seed).unwrap();
        let basis = kpca_for(&d, 5);
        let p0 = Policy::Logistic { beta: vec![0.0; 5] };
        let opts = LearnOptions { steps: 10, ..Default::default() };
        let res = learn_policy_maxmin(&d, &SensitivityModel::tan(1.5), &basis, &p0, &opts, None).unwrap();
        for st in &res.trajectory {
            let pol = p0.with_params(&st.params).unwrap();
            for i in 0..d.len() {
                let x = d.context(i);
                prop_assert!((pol.prob(0.0, &x) + pol.prob(1.0, &x) - 1.0).abs() <= 1e-12);
            }
        }
    }
}
