use std::sync::Arc;

use igsense::bayes::{analyze, apply_inverse_hessian, lowrank_spectrum, misfit_hessian_apply, InverseProblem};
use igsense::elliptic::{build_elliptic, default_observation_points, synthesize_data, true_source};
use igsense::gsa::{dgsm_bound, DgsmOptions, FailurePolicy, PerturbationMap, Quantity};
use igsense::linops::{cg_solve, eig_lowrank_generalized, CoefficientVector, MatrixOperator, SolveCounter, Space};
use igsense::model::{solve_incremental_state, solve_state};
use igsense::oracle::assemble_dense;
use igsense::prior::MassSolver;
use igsense::twobytwo::TwoByTwoSetup;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_elliptic() -> InverseProblem {
    let model = build_elliptic(6, &default_observation_points()).unwrap();
    let prior = model.default_prior(MassSolver::Cholesky).unwrap();
    let m_true = model.mesh().interpolate(true_source);
    let data = synthesize_data(&model, &m_true, &[1.0, 0.1], 0.01, 42).unwrap();
    InverseProblem::new(Arc::new(model), Arc::new(prior), Arc::new(data)).unwrap()
}

fn vector(seed: u64, n: usize) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn state_is_affine_in_the_source(seed in any::<u64>(), c in 0.5f64..2.0, g in 0.0f64..1.0, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let ip = small_elliptic();
        let model = ip.model();
        let n = model.dims().parameter;
        let counter = SolveCounter::new();
        let t = [c, g];
        let (x, y) = (vector(seed, n), vector(seed ^ 0x9e37, n));
        let u0 = solve_state(model, &DVector::zeros(n), &t, &counter).unwrap();
        let lin = |m: &DVector<f64>| solve_state(model, m, &t, &counter).unwrap() - &u0;
        let combo = lin(&(&x * a + &y * b));
        let want = lin(&x) * a + lin(&y) * b;
        prop_assert!((&combo - &want).norm() <= 1e-10 * want.norm().max(1e-12));

        let u_hat = solve_incremental_state(model, &x, &t, &counter).unwrap();
        prop_assert!(rel(&u_hat, &lin(&x)) <= 1e-10);
    }

    #[test]
    fn state_operator_is_symmetric(c in 0.5f64..2.0, seed in any::<u64>()) {
        let ip = small_elliptic();
        let model = ip.model();
        let n = model.dims().state;
        let (x, y) = (vector(seed, n), vector(seed.wrapping_add(1), n));
        let ax = model.apply_state_operator(&[c, 0.1], &x).unwrap();
        let ay = model.apply_state_operator(&[c, 0.1], &y).unwrap();
        prop_assert!((ax.dot(&y) - x.dot(&ay)).abs() <= 1e-12 * ax.norm() * y.norm());
    }

    #[test]
    fn dense_and_matrix_free_actions_agree(seed in any::<u64>(), c in 0.5f64..2.0, g in 0.0f64..1.0) {
        let ip = small_elliptic();
        let t = [c, g];
        let dense = assemble_dense(&ip, &t).unwrap();
        let n = ip.model().dims().parameter;
        let x = vector(seed, n);
        let h = misfit_hessian_apply(&ip, &t, &x).unwrap();
        prop_assert!(rel(&h, &(dense.misfit_hessian() * &x)) <= 1e-9);
        let counter = SolveCounter::new();
        let u = solve_state(ip.model(), &x, &t, &counter).unwrap();
        let obs = ip.model().observe(&u).unwrap();
        prop_assert!(rel(&obs, &(&dense.forward * &x + &dense.offset)) <= 1e-9);
    }

    #[test]
    fn prior_covariance_inverts_precision(seed in any::<u64>()) {
        let ip = small_elliptic();
        let n = ip.model().dims().parameter;
        let x = vector(seed, n);
        let back = ip.prior().apply_cov(&ip.prior().apply_precision(&x).unwrap()).unwrap();
        prop_assert!(rel(&back, &x) <= 1e-8);
    }

    #[test]
    fn woodbury_inverts_full_rank_hessian(seed in any::<u64>(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let ip = TwoByTwoSetup::default().inverse_problem().unwrap();
        let t = [t1, t2];
        let spec = lowrank_spectrum(&ip, &t, 2, 10, 1).unwrap();
        let z = vector(seed, 2);
        let x = apply_inverse_hessian(&spec, ip.prior(), &z).unwrap();
        let back = misfit_hessian_apply(&ip, &t, &x).unwrap() + ip.prior().apply_precision(&x).unwrap();
        prop_assert!(rel(&back, &z) <= 1e-7);
    }

    #[test]
    fn information_measures_are_nonnegative(t1 in 0.0f64..1.0, t2 in 0.0f64..1.0, o1 in -1.0f64..1.0, o2 in -1.0f64..1.0, sigma in 0.01f64..10.0) {
        let setup = TwoByTwoSetup { u_obs: [o1, o2], sigma };
        let ip = setup.inverse_problem().unwrap();
        let s = analyze(&ip, &[t1, t2], 2, 10, 1).unwrap();
        prop_assert!(s.phi_ig >= 0.0 && s.phi_ig_bar >= 0.0);
        prop_assert!((s.phi_ig - setup.kld_closed_form(&[t1, t2]).unwrap()).abs() <= 1e-6 * s.phi_ig.max(1.0));
    }

    #[test]
    fn generalized_eigenvectors_are_b_orthonormal(seed in any::<u64>(), n in 6usize..20, rank in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let a = x.transpose() * &x;
        let y = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let b = y.transpose() * &y + DMatrix::identity(n, n);
        let b_inv = b.clone().try_inverse().unwrap();
        let op = |m: &DMatrix<f64>| MatrixOperator::new(m.clone(), Space::Parameter, Space::Parameter);
        let eig = eig_lowrank_generalized(&op(&a), &op(&b), &op(&b_inv), rank, 10, seed).unwrap();
        for w in eig.values.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        for (i, vi) in eig.vectors.iter().enumerate() {
            for (j, vj) in eig.vectors.iter().enumerate() {
                let ip = vi.dot(&(&b * vj));
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((ip - want).abs() <= 1e-8, "({i},{j}) = {ip}");
            }
        }
    }

    #[test]
    fn cg_meets_its_residual_target(seed in any::<u64>(), n in 2usize..30, tol_exp in 4i32..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let a = x.transpose() * &x + DMatrix::identity(n, n) * 0.1;
        let rhs = vector(seed, n);
        let tol = 10f64.powi(-tol_exp);
        let op = MatrixOperator::new(a.clone(), Space::Parameter, Space::Parameter);
        let sol = cg_solve(&op, &CoefficientVector::new(Space::Parameter, rhs.clone()).unwrap(), tol, 10 * n + 100).unwrap();
        prop_assert!((&a * sol.values() - &rhs).norm() <= tol * rhs.norm() * (1.0 + 1e-9));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn dgsm_bounds_are_nonnegative_and_reproducible(seed in any::<u64>(), alpha in 0.1f64..0.9) {
        let setup = TwoByTwoSetup::default();
        let ip = setup.inverse_problem().unwrap();
        let pmap = PerturbationMap::new(vec![0.5, 0.5], alpha).unwrap();
        let opts = DgsmOptions {
            n_samples: 40,
            seed,
            rank: 2,
            oversample: 10,
            eig_seed: 1,
            quantity: Quantity::InformationGain,
            policy: FailurePolicy::Abort,
        };
        let a = dgsm_bound(&ip, &setup.theta_template(), &pmap, &opts).unwrap();
        let b = dgsm_bound(&ip, &setup.theta_template(), &pmap, &opts).unwrap();
        prop_assert!(a.bound.iter().all(|&v| v >= 0.0));
        prop_assert_eq!(
            a.bound.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.bound.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn closed_form_kld_is_nonnegative_over_many_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10_000 {
        let setup = TwoByTwoSetup {
            u_obs: [rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0],
            sigma: 10f64.powf(rng.random::<f64>() * 4.0 - 2.0),
        };
        let t = [rng.random::<f64>(), rng.random::<f64>()];
        let kld = setup.kld_closed_form(&t).unwrap();
        assert!(kld >= 0.0, "{kld} at {t:?}");
    }
}
