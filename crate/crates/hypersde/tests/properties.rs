mod common;

use common::{cascade_sde, scalar_plant};
use hypersde::checks::random_controllable_pair;
use hypersde::control::{design_feedback, FeedbackController};
use hypersde::covariance::{predictor_identity_gap, PathRecord};
use hypersde::kernels::{backstep, inverse_backstep, solve_kernels, KernelSet};
use hypersde::linalg;
use hypersde::reduction::kalman_decompose;
use hypersde::sim::{path_rng, run_monte_carlo, DelayedSim, McConfig, Moments, PathOutput};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::sync::OnceLock;

fn scalar_kernels() -> &'static KernelSet {
    static KS: OnceLock<KernelSet> = OnceLock::new();
    KS.get_or_init(|| solve_kernels(&scalar_plant(0.5, 0.3, 0.1), 48, 1e-12, 400).unwrap())
}

fn matrix(n: usize, m: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, n * m).prop_map(move |v| DMatrix::from_vec(n, m, v))
}

fn pair() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>)> {
    (1usize..=5, 1usize..=3).prop_flat_map(|(n, m)| (matrix(n, n), matrix(n, m)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decomposition_is_block_triangular_and_invertible((a, b) in pair()) {
        prop_assume!(linalg::is_controllable(&a, &b));
        let kf = kalman_decompose(&a, &b).unwrap();
        let n = a.nrows();
        prop_assert!(kf.lower_block_residual() < 1e-9);
        prop_assert!((&kf.t * &kf.t_inv - DMatrix::identity(n, n)).amax() < 1e-9);
        prop_assert!(kf.diagonal_pairs_controllable());
        prop_assert_eq!(kf.sizes.iter().sum::<usize>(), n);
        // similarity preserves the drift
        let back = &kf.t_inv * &kf.abar * &kf.t;
        prop_assert!((back - &a).amax() < 1e-8 * (1.0 + a.amax()));
    }

    #[test]
    fn sparse_pairs_decompose(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = random_controllable_pair(&mut rng);
        let kf = kalman_decompose(&a, &b).unwrap();
        prop_assert!(kf.lower_block_residual() < 1e-10);
        prop_assert!(kf.diagonal_pairs_controllable());
    }

    #[test]
    fn feedback_places_every_pole(seed in any::<u64>(), nu in 0.2f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = random_controllable_pair(&mut rng);
        let kf = kalman_decompose(&a, &b).unwrap();
        let h = vec![0.3; b.ncols()];
        let law = design_feedback(&kf, &h, nu).unwrap();
        for (i, sp) in law.spectra(&kf).iter().enumerate() {
            // a pole of multiplicity k moves by about eps^(1/k)
            let tol = 1e-3f64.max(1e-12f64.powf(1.0 / kf.sizes[i] as f64) * 10.0);
            for re in sp {
                prop_assert!((re + nu).abs() < tol * (1.0 + nu), "block {i}: {re} vs {}", -nu);
            }
        }
    }

    #[test]
    fn merged_moments_match_sequential(xs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..60), cut in 0usize..60) {
        let cut = cut.min(xs.len());
        let mut all = Moments::new(3);
        let (mut left, mut right) = (Moments::new(3), Moments::new(3));
        for (k, x) in xs.iter().enumerate() {
            let v = DVector::from_column_slice(x);
            all.push(&v);
            if k < cut { left.push(&v) } else { right.push(&v) }
        }
        left.merge(&right);
        prop_assert_eq!(left.n, all.n);
        prop_assert!((&left.mean - &all.mean).amax() < 1e-10);
        prop_assert!((&left.c2 - &all.c2).amax() < 1e-8);
        prop_assert!((&left.m3 - &all.m3).amax() < 1e-7);
        prop_assert!((&left.m4 - &all.m4).amax() < 1e-6);
    }

    #[test]
    fn parallel_and_serial_are_bitwise_equal(seed in any::<u64>(), paths in 1usize..300, chunk in 1usize..80) {
        let times = [0.0, 1.0, 2.0];
        let path = |_: usize, rng: &mut ChaCha8Rng| {
            let mut out = PathOutput::default();
            let mut x = 0.0f64;
            for _ in 0..3 {
                x = 0.7 * x + rng.sample::<f64, _>(StandardNormal);
                out.series.push(DVector::from_vec(vec![x, x * x]));
            }
            out.scalars.push(x.abs());
            out
        };
        let par = McConfig { paths, seed, chunk, parallel: true, ..Default::default() };
        let ser = McConfig { parallel: false, ..par.clone() };
        let a = run_monte_carlo(&par, &times, 2, 1, path).unwrap();
        let b = run_monte_carlo(&ser, &times, 2, 1, path).unwrap();
        for k in 0..times.len() {
            prop_assert_eq!(a.mean(k), b.mean(k));
            prop_assert_eq!(&a.moments[k].c2, &b.moments[k].c2);
        }
        prop_assert_eq!(a.scalar_mean(0).to_bits(), b.scalar_mean(0).to_bits());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn backstepping_round_trips(seed in any::<u64>()) {
        let ks = scalar_kernels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = || rng.sample::<f64, _>(StandardNormal);
        let x = DVector::from_element(1, g());
        let u = DMatrix::from_fn(1, ks.nx, |_, _| g());
        let v = DMatrix::from_fn(1, ks.nx, |_, _| g());
        let (al, be) = backstep(ks, &x, &u, &v).unwrap();
        let (u2, v2) = inverse_backstep(ks, &x, &al, &be).unwrap();
        prop_assert!((u2 - u).amax() < 1e-9);
        prop_assert!((v2 - v).amax() < 1e-9);
    }

    #[test]
    fn predictor_identity_on_random_paths(seed in any::<u64>(), nu in 0.5f64..2.0) {
        let sde = cascade_sde(2.0);
        let dt = 2e-3;
        let kf = kalman_decompose(&sde.a, &sde.b).unwrap();
        let law = design_feedback(&kf, &sde.h, nu).unwrap();
        let sim = DelayedSim::new(&sde, dt, sde.horizon).unwrap();
        let mut rng = path_rng(seed, 0);
        let mut rec = PathRecord::default();
        let mut ctrl = FeedbackController::new(&law, &kf, &sde, dt);
        sim.run_path(&mut ctrl, &mut rng, 1e8, Some(&mut rec), |_, _, _| {});
        for i in 0..kf.blocks() {
            for (t, gap) in predictor_identity_gap(&kf, &sde, &rec, i) {
                prop_assert!(gap < 1e-9, "block {i} at t = {t}: {gap}");
            }
        }
    }
}
