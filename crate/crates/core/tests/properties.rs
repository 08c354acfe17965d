use proptest::prelude::*;

use tsg_core::adjoint::{neumann_inverse_apply, ul_adjoint_gradient, AdjointConfig, Engine};
use tsg_core::driver::StepSchedule;
use tsg_core::linalg::{cg_solve, solve_dense, tensor_contract_mat, tensor_contract_vec, Matrix, Tensor3, Vector};
use tsg_core::oracle::{Block, Level, ProblemOracle, SampleSpec};
use tsg_core::synthetic::{paper_default_quadratic, paper_default_quartic, paper_init_points, LowerLevel, SyntheticProblem};
use tsg_core::verify::{fd_grad_f, FdOracleConfig, InnerSource};

fn spd(d: usize, entries: &[f64]) -> Matrix {
    let b = Matrix::from_fn(d, d, |i, j| entries[i * d + j]);
    let mut a = b.transpose().matmul(&b).unwrap();
    a.axpy(0.5, &Matrix::identity(d));
    a
}

fn spd_system() -> impl Strategy<Value = (Matrix, Vector)> {
    (1usize..=20).prop_flat_map(|d| {
        (prop::collection::vec(-1.0..1.0f64, d * d), prop::collection::vec(-10.0..10.0f64, d))
            .prop_map(move |(e, b)| (spd(d, &e), Vector::from(b)))
    })
}

fn tensor_and_vecs() -> impl Strategy<Value = (Tensor3, Vector, Vector)> {
    (1usize..=4, 1usize..=4, 1usize..=4).prop_flat_map(|(a, b, c)| {
        (
            prop::collection::vec(-3.0..3.0f64, a * b * c),
            prop::collection::vec(-3.0..3.0f64, b),
            prop::collection::vec(-3.0..3.0f64, b),
        )
            .prop_map(move |(t, u, v)| (Tensor3::from_data((a, b, c), t).unwrap(), Vector::from(u), Vector::from(v)))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cg_converges_within_d_plus_two((a, b) in spd_system()) {
        let d = b.dim();
        let rep = cg_solve(|v| a.matvec(v), &b, 1e-8, d + 2).unwrap();
        prop_assert!(!rep.terminated_on_curvature);
        prop_assert!(rep.iterations <= d + 2);
        let resid = (&a.matvec(&rep.solution).unwrap() - &b).norm();
        prop_assert!(resid <= 1e-8 * b.norm().max(1.0), "residual {resid}");
    }

    #[test]
    fn cg_agrees_with_lu((a, b) in spd_system()) {
        let rep = cg_solve(|v| a.matvec(v), &b, 1e-12, 200).unwrap();
        let exact = solve_dense(&a, &b).unwrap();
        prop_assert!(rep.solution.relative_error(&exact) <= 1e-6);
    }

    #[test]
    fn contraction_vec_matches_mat((t, v, _) in tensor_and_vecs()) {
        let m = tensor_contract_vec(&t, &v).unwrap();
        let t2 = tensor_contract_mat(&t, &v.to_column()).unwrap();
        let (d1, _, d3) = t.dims();
        prop_assert_eq!(t2.dims(), (d1, 1, d3));
        for a in 0..d1 {
            for c in 0..d3 {
                prop_assert!((m[(a, c)] - t2.get(a, 0, c)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn contraction_is_linear((t, u, v) in tensor_and_vecs(), alpha in -2.0..2.0f64, beta in -2.0..2.0f64) {
        let mut comb = u.scaled(alpha);
        comb.axpy(beta, &v);
        let lhs = tensor_contract_vec(&t, &comb).unwrap();
        let mut rhs = tensor_contract_vec(&t, &u).unwrap().scaled(alpha);
        rhs.axpy(beta, &tensor_contract_vec(&t, &v).unwrap());
        prop_assert!((&lhs - &rhs).max_abs() <= 1e-12);
    }

    #[test]
    fn neumann_error_within_geometric_bound(
        diag in prop::collection::vec(0.05..1.0f64, 1..8),
        b in prop::collection::vec(-5.0..5.0f64, 8),
        q in 0usize..=20,
    ) {
        let a = Vector::from(diag);
        let b = Vector::from(&b[..a.dim()]);
        let scale = 1.0 / a.iter().cloned().fold(0.0, f64::max);
        let rho = a.iter().map(|ai| 1.0 - scale * ai).fold(0.0, f64::max);
        let approx = neumann_inverse_apply(|v| Ok(Vector::from_fn(v.dim(), |i| a[i] * v[i])), &b, q, scale).unwrap();
        let exact = Vector::from_fn(a.dim(), |i| b[i] / a[i]);
        let bound = scale * rho.powi(q as i32 + 1) / (1.0 - rho) * b.norm();
        prop_assert!((&approx - &exact).norm() <= bound * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn schedule_steps_stay_in_unit_interval(
        alpha in 1e-6..=1.0f64, beta in 1e-6..=1.0f64, gamma in 1e-6..=1.0f64, idx in 1usize..10_000,
    ) {
        for s in [StepSchedule::Decaying { alpha, beta, gamma }, StepSchedule::Constant { alpha, beta, gamma }] {
            for v in [s.alpha(idx), s.beta(idx), s.gamma(idx)] {
                prop_assert!(v > 0.0 && v <= 1.0);
            }
        }
    }

    #[test]
    fn theorem_schedule_identities(i in 1usize..10_000, j in 1usize..1000, k in 1usize..1000, at in 1usize..50) {
        let s = StepSchedule::TheoremConstant { i, j, k };
        let (a, b, g) = (s.alpha(at), s.beta(at), s.gamma(at));
        prop_assert!(a > 0.0 && a <= 1.0 && b > 0.0 && b <= 1.0 && g > 0.0 && g <= 1.0);
        prop_assert!((a - 1.0 / (i as f64).sqrt()).abs() <= 1e-15);
        prop_assert!((b - a / (j as f64).sqrt()).abs() <= 1e-15);
        prop_assert!((g - b / (k as f64).sqrt()).abs() <= 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn nfd_equals_h_on_quadratics(eps in 1e-3..2.0f64, seed in 0u64..50) {
        let spec = paper_default_quadratic(4, 4, 4, seed).unwrap();
        let prob = SyntheticProblem::new(spec).unwrap();
        let p = paper_init_points(LowerLevel::Quadratic, prob.dims(), seed);
        let det = SampleSpec::Deterministic;
        let h = ul_adjoint_gradient(&prob, &p, &det, &AdjointConfig::with_engine(Engine::H)).unwrap().grad;
        let nfd = AdjointConfig { fd_eps: eps, cg_tol: 1e-12, ..AdjointConfig::with_engine(Engine::Nfd) };
        let g = ul_adjoint_gradient(&prob, &p, &det, &nfd).unwrap().grad;
        prop_assert!(g.relative_error(&h) <= 1e-8, "{}", g.relative_error(&h));
    }

    #[test]
    fn ul_gradient_matches_referee_on_quadratic(seed in 0u64..50, xs in prop::collection::vec(-100.0..100.0f64, 5)) {
        let spec = paper_default_quadratic(5, 5, 5, seed).unwrap();
        let prob = SyntheticProblem::new(spec.clone()).unwrap();
        let x = Vector::from(xs);
        let p = spec.solution_path(&x).unwrap();
        let g = ul_adjoint_gradient(&prob, &p, &SampleSpec::Deterministic, &AdjointConfig::with_engine(Engine::H)).unwrap().grad;
        let analytic = spec.closed_form_grad_f(&x).unwrap();
        prop_assert!(g.relative_error(&analytic) <= 1e-8);
        let cfg = FdOracleConfig { use_closed_form: true, ..Default::default() };
        let fd = fd_grad_f(&prob, InnerSource::ClosedForm(&spec), &x, &cfg).unwrap();
        prop_assert!(fd.relative_error(&analytic) <= 1e-7);
    }

    #[test]
    fn lower_hessians_are_symmetric(seed in 0u64..100) {
        let spec = paper_default_quartic(3, 3, 3, seed).unwrap();
        let prob = SyntheticProblem::new(spec).unwrap();
        let p = paper_init_points(LowerLevel::Quartic, prob.dims(), seed);
        let det = SampleSpec::Deterministic;
        let hzz = prob.hess(Level::F3, Block::Z, Block::Z, &p, &det).unwrap();
        prop_assert!((&hzz - &hzz.transpose()).max_abs() <= 1e-12);
        let hxz = prob.hess(Level::F3, Block::X, Block::Z, &p, &det).unwrap();
        let hzx = prob.hess(Level::F3, Block::Z, Block::X, &p, &det).unwrap();
        prop_assert!((&hxz - &hzx.transpose()).max_abs() <= 1e-12);
    }
}

#[test]
fn fd_referee_halving_is_self_consistent() {
    let spec = paper_default_quartic(3, 3, 1, 2).unwrap();
    let prob = SyntheticProblem::new(spec.clone()).unwrap();
    let mut warm = paper_init_points(LowerLevel::Quartic, prob.dims(), 2);
    warm.z = spec.closed_form_z(&warm.x, &warm.y).unwrap();
    let x = warm.x.clone();
    let at = |eps| {
        let cfg = FdOracleConfig { outer_eps: eps, ..Default::default() };
        fd_grad_f(&prob, InnerSource::Descent(&warm), &x, &cfg).unwrap()
    };
    for eps in [2e-1, 4e-2, 1e-2] {
        let (g1, g2, g3) = (at(eps), at(eps / 2.0), at(eps / 4.0));
        let d1 = (&g1 - &g2).norm();
        let d2 = (&g2 - &g3).norm();
        assert!(d2 <= 4.0 * d1, "eps {eps}: changes {d1:e} then {d2:e}");
    }
}

#[test]
fn quadratic_third_order_vanishes() {
    let spec = paper_default_quadratic(3, 3, 3, 0).unwrap();
    let prob = SyntheticProblem::new(spec).unwrap();
    let p = paper_init_points(LowerLevel::Quadratic, prob.dims(), 0);
    let v = Vector::filled(3, 0.7);
    for r in [Block::X, Block::Y, Block::Z] {
        for c in [Block::X, Block::Y, Block::Z] {
            assert_eq!(prob.third_contract(r, c, &p, &SampleSpec::Deterministic, &v).unwrap().max_abs(), 0.0);
        }
    }
}
