mod common;

use gnsfde::coeffs::{check_c2, check_h1_h4, ConditionId, SamplerConfig, Verdict};
use gnsfde::comparison::{run_order_experiment, OrderSetup, PsiFamily, TolPolicy};
use gnsfde::drivers::{bang_bang_control, sample_driver, DriverPath, StreamKey, TimeGrid};
use gnsfde::gcalc::{g_value, loewner_leq, GBounds, SymMatrix};
use gnsfde::gexp::{estimate_gexp, ControlFamily, FamilySpec};
use gnsfde::segments::{leq, leq_n, meet, Segment};
use gnsfde::solver::{solve_pair, SolverOptions};
use nalgebra::DMatrix;
use proptest::prelude::*;

use common::scalar_system;

fn arb_bounds(m: usize) -> impl Strategy<Value = GBounds> {
    (0.5..2.0f64, 0.1..1.5f64).prop_map(move |(lo, gap)| GBounds::new(lo, lo + gap, m).unwrap())
}

fn arb_sym(m: usize) -> impl Strategy<Value = SymMatrix> {
    prop::collection::vec(-5.0..5.0f64, m * m)
        .prop_map(move |v| SymMatrix::new(DMatrix::from_vec(m, m, v)).unwrap())
}

fn arb_g_case() -> impl Strategy<Value = (GBounds, SymMatrix, SymMatrix)> {
    (1usize..=3).prop_flat_map(|m| (arb_bounds(m), arb_sym(m), arb_sym(m)))
}

fn arb_segment_triple() -> impl Strategy<Value = (Segment, Segment, Segment)> {
    (1usize..=2, 0usize..=4).prop_flat_map(|(d, l)| {
        let n = d * (l + 1);
        // small integer values make ties and equalities common
        let v = || prop::collection::vec((-2i32..=2).prop_map(f64::from), n);
        (v(), v(), v()).prop_map(move |(a, b, c)| {
            let s = |x| Segment::new(d, l, 0.25, x).unwrap();
            (s(a), s(b), s(c))
        })
    })
}

proptest! {
    #[test]
    fn g_positive_homogeneity((b, x, _) in arb_g_case(), lambda in 0.0..10.0f64) {
        let lhs = g_value(&x.scale(lambda), &b).unwrap();
        let rhs = lambda * g_value(&x, &b).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + x.scale(lambda).frobenius()));
    }

    #[test]
    fn g_subadditivity((b, x, y) in arb_g_case()) {
        let (gx, gy) = (g_value(&x, &b).unwrap(), g_value(&y, &b).unwrap());
        prop_assert!(g_value(&x.add(&y), &b).unwrap() <= gx + gy + 1e-9);
        prop_assert!(gx - gy <= g_value(&x.sub(&y), &b).unwrap() + 1e-9);
    }

    #[test]
    fn g_norm_bound_and_continuity((b, x, y) in arb_g_case()) {
        let c = 0.5 * (b.dim as f64).sqrt() * b.var_high();
        prop_assert!(g_value(&x, &b).unwrap().abs() <= c * x.frobenius() + 1e-9);
        let diff = (g_value(&x, &b).unwrap() - g_value(&y, &b).unwrap()).abs();
        prop_assert!(diff <= c * x.sub(&y).frobenius() + 1e-9);
    }

    #[test]
    fn g_monotone_gap((b, y, p) in arb_g_case()) {
        // x = y + p pᵀ-like PSD increment
        let psd = SymMatrix::new(p.as_matrix() * p.as_matrix().transpose()).unwrap();
        let x = y.add(&psd);
        prop_assume!(loewner_leq(&y, &x, 0.0).unwrap());
        let gap = g_value(&x, &b).unwrap() - g_value(&y, &b).unwrap();
        prop_assert!(gap >= 0.5 * b.var_low() * x.sub(&y).trace() - 1e-9);
    }

    #[test]
    fn leq_is_a_partial_order((a, b, c) in arb_segment_triple()) {
        prop_assert!(leq(&a, &a).unwrap());
        if leq(&a, &b).unwrap() && leq(&b, &a).unwrap() {
            prop_assert_eq!(&a, &b);
        }
        if leq(&a, &b).unwrap() && leq(&b, &c).unwrap() {
            prop_assert!(leq(&a, &c).unwrap());
        }
        let w = meet(&a, &b).unwrap();
        prop_assert!(leq(&w, &a).unwrap() && leq(&w, &b).unwrap());
    }

    #[test]
    fn leq_n_implies_leq((a, b, _) in arb_segment_triple(), k in 0.0..0.9f64) {
        let n = move |s: gnsfde::segments::SegmentView<'_>| (0..s.d).map(|i| k * s.at(0, i)).collect::<Vec<_>>();
        if leq_n(&a, &b, &n).unwrap() {
            prop_assert!(leq(&a, &b).unwrap());
        }
    }

    #[test]
    fn psi_inequalities(n in 1u32..200, s in -1.0..2.0f64) {
        let f = PsiFamily::new(n).unwrap();
        let (p, dp, ddp) = f.eval(s);
        let pos = s.max(0.0);
        let ind = |c: bool| if c { 1.0 } else { 0.0 };
        prop_assert!(dp >= 0.0 && dp <= ind(s > 0.0) + 1e-15);
        prop_assert!(p >= 0.0 && p <= pos + 1e-15);
        prop_assert!(pos - p <= 0.5 / n as f64 + 1e-15);
        prop_assert!(s * ddp <= ind(s > 0.0 && s < 1.0 / n as f64) + 1e-12);
        prop_assert!(PsiFamily::new(n + 1).unwrap().eval(s).0 >= p - 1e-15);
    }

    #[test]
    fn qv_increments_respect_bounds(seed in any::<u64>(), p in 0.0..1.0f64, m in 1usize..=3) {
        let b = GBounds::new(1.0, 2.0, m).unwrap();
        let grid = TimeGrid::new(0.01, 50, 0).unwrap();
        let c = bang_bang_control(&grid, seed, &b, p).unwrap();
        let drv = sample_driver(&c, &grid, StreamKey { master_seed: seed, sample_index: 0 }).unwrap();
        for k in 0..grid.steps {
            let rate = drv.dqv_matrix(k).scale(1.0 / grid.dt);
            prop_assert!(loewner_leq(&SymMatrix::scalar(m, b.var_low()), &rate, 1e-12).unwrap());
            prop_assert!(loewner_leq(&rate, &SymMatrix::scalar(m, b.var_high()), 1e-12).unwrap());
        }
    }
}

fn small_family(grid: &TimeGrid, b: &GBounds) -> ControlFamily {
    ControlFamily::from_specs(
        &[FamilySpec::ConstantGrid { n: 3 }, FamilySpec::BangBang { count: 2, seed: 4, switch_prob: 0.2 }],
        grid,
        b,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gexp_monotone_and_constant(seed in any::<u64>(), c in -3.0..3.0f64, shift in 0.0..1.0f64) {
        let b = GBounds::new(1.0, 2.0, 1).unwrap();
        let grid = TimeGrid::new(1.0 / 16.0, 16, 0).unwrap();
        let fam = small_family(&grid, &b);
        let x = |d: &DriverPath| Ok(d.b_terminal(0).powi(2) - d.b_terminal(0));
        let y = |d: &DriverPath| Ok(d.b_terminal(0).powi(2) - d.b_terminal(0) + shift);
        let ex = estimate_gexp(&x, &fam, 64, &grid, seed).unwrap();
        let ey = estimate_gexp(&y, &fam, 64, &grid, seed).unwrap();
        prop_assert!(ex.value <= ey.value);
        let konst = move |_: &DriverPath| Ok(c);
        prop_assert_eq!(estimate_gexp(&konst, &fam, 16, &grid, seed).unwrap().value, c);
    }

    #[test]
    fn gexp_subadditive(seed in any::<u64>()) {
        let b = GBounds::new(1.0, 2.0, 1).unwrap();
        let grid = TimeGrid::new(1.0 / 16.0, 16, 0).unwrap();
        let fam = small_family(&grid, &b);
        let x = |d: &DriverPath| Ok(d.b_terminal(0).powi(2));
        let y = |d: &DriverPath| Ok(-d.qv_terminal().get(0, 0));
        let xy = |d: &DriverPath| Ok(d.b_terminal(0).powi(2) - d.qv_terminal().get(0, 0));
        let (ex, ey) = (estimate_gexp(&x, &fam, 256, &grid, seed).unwrap(), estimate_gexp(&y, &fam, 256, &grid, seed).unwrap());
        let exy = estimate_gexp(&xy, &fam, 256, &grid, seed).unwrap();
        let se = |e: &gnsfde::gexp::GExpEstimate| e.per_control[e.argmax].std_error;
        prop_assert!(exy.value <= ex.value + ey.value + 4.0 * (se(&ex) + se(&ey)));
    }

    #[test]
    fn paired_solve_is_order_independent(seed in any::<u64>(), a0 in -1.0..0.0f64, gamma in 1.0..4.0f64) {
        let s = scalar_system("-0.5*z1 + 0.5*x1(-r0)", "0.2*z1", "0.4*z1 + 0.1", "0.3*x1(-r0)", 0.25, 0.3);
        let t = scalar_system("-z1 + 0.2*x1(-r0)", "0.1", "0.4*z1 + 0.1", "0.3*x1(-r0)", 0.25, 0.3);
        let dt = 1.0 / 64.0;
        let grid = TimeGrid::from_horizon(dt, 0.5, 0.25).unwrap();
        let ctl = gnsfde::drivers::constant_control(&SymMatrix::scalar(1, gamma), &s.bounds).unwrap();
        let drv = sample_driver(&ctl, &grid, StreamKey { master_seed: seed, sample_index: 1 }).unwrap();
        let xi = Segment::constant(1, 16, dt, &[a0]).unwrap();
        let eta = Segment::constant(1, 16, dt, &[0.0]).unwrap();
        let p = solve_pair(&s, &t, &xi, &eta, &drv, &SolverOptions::default()).unwrap();
        let q = solve_pair(&t, &s, &eta, &xi, &drv, &SolverOptions::default()).unwrap();
        prop_assert_eq!(&p.a.values, &q.b.values);
        prop_assert_eq!(&p.b.values, &q.a.values);
    }

    #[test]
    fn h1_and_a2_imply_finite_c2(c in -2.0..2.0f64, k in -1.0..1.0f64, seed in any::<u64>()) {
        let sigma = format!("{c}*z1 + {k}*tanh(z1) + 0.3");
        let s = scalar_system("-z1", "0", &sigma, "0.3*x1(-r0)", 0.25, 0.3);
        let sampler = SamplerConfig::new(64, 2.0, seed, 1.0 / 16.0);
        let h = check_h1_h4(&s, &s, &sampler, 1.0).unwrap();
        prop_assert!(h.iter().find(|r| r.id == ConditionId::H1).unwrap().verdict == Verdict::Pass);
        let r = check_c2(&s, &s, &sampler, 1.0).unwrap();
        prop_assert_eq!(r.verdict, Verdict::Pass);
        prop_assert!(r.statistic.is_finite());
    }

    #[test]
    fn eval_system_is_deterministic(t in 0.0..2.0f64, a in -3.0..3.0f64) {
        let s = scalar_system("-0.5*z1 + 0.5*x1(-r0)", "0.2*z1 + min(x1(0), 1)", "0.4*z1 + 0.1", "0.3*x1(-r0)", 0.25, 0.3);
        let seg = Segment::from_fn(1, 4, 0.0625, |u, _| a + u).unwrap();
        prop_assert_eq!(s.eval_system(t, seg.view()).unwrap(), s.eval_system(t, seg.view()).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn capacity_monotone_over_supersets(extra in 1usize..4, seed in any::<u64>()) {
        let s = scalar_system("-0.5*z1 + 0.5*x1(-r0)", "0", "0.5*x1(-r0)", "0.3*x1(-r0)", 0.25, 0.3);
        let dt = 1.0 / 32.0;
        let grid = TimeGrid::from_horizon(dt, 1.0, 0.25).unwrap();
        let xi = Segment::from_fn(1, 8, dt, |u, _| -0.3 + 2.8 * u).unwrap();
        let eta = Segment::constant(1, 8, dt, &[0.0]).unwrap();
        let small = ControlFamily::constant_grid(2, &s.bounds).unwrap();
        let mut big = small.clone();
        big.members.extend(ControlFamily::from_specs(
            &[FamilySpec::BangBang { count: extra, seed, switch_prob: 0.3 }], &grid, &s.bounds).unwrap().members);
        let run = |fam: &ControlFamily| run_order_experiment(&OrderSetup {
            scenario: "prop", sys_a: &s, sys_b: &s, init_a: &xi, init_b: &eta, family: fam,
            n_samples: 64, grid, master_seed: seed, tol: TolPolicy::default(), solver: SolverOptions::default(),
        }).unwrap();
        let (a, b) = (run(&small), run(&big));
        prop_assert!(b.capacity >= a.capacity);
        prop_assert_eq!(a.ordering_violations + b.ordering_violations, 0);
    }
}
