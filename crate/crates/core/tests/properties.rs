//! Property tests over randomly drawn inputs.

use edmloc::eval::{aligned_msle, msle, procrustes_align};
use edmloc::nn::{adagrad_step, backward, forward, init_mlp, AdagradState, MlpConfig};
use edmloc::scene::outlier_count;
use edmloc::solver::{
    update_d, update_l, LUpdateMode, ThresholdConvention,
};
use edmloc::{
    apply_mask, check_edm_properties, complement_mask, edm_from_coords, frobenius_sq,
    CoordinateMatrix, ObservationMask, OutlierMatrix, Scene, SceneSpec, SquaredDistanceMatrix,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(n: usize, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
}

fn coords(n: usize, k: usize, rng: &mut ChaCha8Rng) -> CoordinateMatrix {
    CoordinateMatrix::new(matrix(n, k, rng)).unwrap()
}

fn mask(n: usize, p: f64, rng: &mut ChaCha8Rng) -> ObservationMask {
    ObservationMask::from_upper_fn(n, |i, j| i == j || rng.random_bool(p))
}

fn orthogonal(k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    matrix(k, k, rng).qr().q()
}

fn rigid(x: &DMatrix<f64>, q: &DMatrix<f64>, shift: &DVector<f64>) -> DMatrix<f64> {
    let mut y = x * q;
    for mut row in y.row_iter_mut() {
        row += shift.transpose();
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn separation_identity_holds(n in 1usize..25, p in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = matrix(n, n, &mut rng);
        let e = mask(n, p, &mut rng);
        let total = frobenius_sq(&m);
        let split = frobenius_sq(&apply_mask(&m, &e).unwrap())
            + frobenius_sq(&apply_mask(&m, &complement_mask(&e)).unwrap());
        prop_assert!((total - split).abs() <= 1e-12 * total.max(1.0));
    }

    #[test]
    fn masking_is_idempotent(n in 1usize..20, p in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = matrix(n, n, &mut rng);
        let e = mask(n, p, &mut rng);
        let once = apply_mask(&m, &e).unwrap();
        prop_assert_eq!(apply_mask(&once, &e).unwrap(), once.clone());
        let other = apply_mask(&m, &complement_mask(&e)).unwrap();
        prop_assert_eq!(once + other, m);
    }

    #[test]
    fn edm_is_invariant_under_rigid_motion(n in 2usize..20, k in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = coords(n, k, &mut rng);
        let q = orthogonal(k, &mut rng);
        let shift = DVector::from_fn(k, |_, _| rng.random_range(-5.0..5.0));
        let y = CoordinateMatrix::new(rigid(x.as_matrix(), &q, &shift)).unwrap();
        let a = edm_from_coords(&x).into_inner();
        let b = edm_from_coords(&y).into_inner();
        let scale = a.amax().max(1.0);
        prop_assert!((a - b).amax() <= 1e-10 * scale);
    }

    #[test]
    fn edm_rank_is_at_most_k_plus_two(n in 6usize..40, k in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = edm_from_coords(&coords(n, k, &mut rng));
        let report = check_edm_properties(d.as_matrix(), k, 1e-8);
        prop_assert!(report.all_pass(), "{:?}", report);
    }

    #[test]
    fn generated_scenes_are_well_formed(
        n in 5usize..40,
        r in 0.2f64..2.0,
        ratio in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        let scene = Scene::generate(&SceneSpec {
            n,
            k: 3,
            radio_range: r,
            outlier_ratio: ratio,
            outlier_magnitude_max: None,
            seed,
        })
        .unwrap();
        prop_assert!(scene.mask.is_symmetric());
        prop_assert!(scene.mask.includes_diagonal());
        let observed = scene.mask.upper_offdiag_pairs().len();
        prop_assert_eq!(scene.outlier_count(), outlier_count(ratio, observed));
        for i in 0..n {
            for j in 0..n {
                let dist2 = scene.d_true.get(i, j);
                prop_assert_eq!(scene.mask.contains(i, j), i == j || dist2 <= r * r);
                if !scene.mask.contains(i, j) {
                    prop_assert_eq!(scene.d_obs.get(i, j), 0.0);
                }
            }
        }
        prop_assert!(scene.validate().is_ok());
    }

    #[test]
    fn procrustes_never_increases_residual(n in 3usize..30, k in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_ref = coords(n, k, &mut rng);
        let x_hat = coords(n, k, &mut rng);
        let aligned = procrustes_align(&x_hat, &x_ref).unwrap();
        let before = frobenius_sq(&(x_hat.as_matrix() - x_ref.as_matrix()));
        let after = frobenius_sq(&(aligned.as_matrix() - x_ref.as_matrix()));
        prop_assert!(after <= before + 1e-10);
    }

    #[test]
    fn aligned_msle_ignores_common_rigid_motion(n in 3usize..30, k in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_ref = coords(n, k, &mut rng);
        let x_hat = coords(n, k, &mut rng);
        let q = orthogonal(k, &mut rng);
        let shift = DVector::from_fn(k, |_, _| rng.random_range(-3.0..3.0));
        let moved_hat = CoordinateMatrix::new(rigid(x_hat.as_matrix(), &q, &shift)).unwrap();
        let base = aligned_msle(&x_hat, &x_ref).unwrap();
        let moved = aligned_msle(&moved_hat, &x_ref).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9);
        prop_assert!(msle(&x_ref, &x_ref, None).unwrap() == 0.0);
    }

    #[test]
    fn larger_tau_gives_sparser_outliers(
        n in 4usize..15,
        tau in 0.0f64..1.0,
        extra in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_prev = coords(n, 3, &mut rng);
        let x_curr = coords(n, 3, &mut rng);
        let e = mask(n, 0.6, &mut rng);
        let d_obs = SquaredDistanceMatrix::new(
            apply_mask(edm_from_coords(&coords(n, 3, &mut rng)).as_matrix(), &e).unwrap(),
        )
        .unwrap();
        let l0 = OutlierMatrix::zeros(n);
        let d = update_d(&x_prev, &l0, &d_obs, &e).unwrap();
        for mode in [LUpdateMode::PaperLiteral, LUpdateMode::ResidualProx] {
            let small = update_l(&x_curr, &x_prev, &d, &l0, &d_obs, &e, tau, mode,
                ThresholdConvention::PaperTau).unwrap();
            let large = update_l(&x_curr, &x_prev, &d, &l0, &d_obs, &e, tau + extra, mode,
                ThresholdConvention::PaperTau).unwrap();
            prop_assert!(large.nnz() <= small.nnz());
            prop_assert!(small.is_symmetric() && large.is_symmetric());
        }
    }

    #[test]
    fn literal_mode_support_stays_unobserved(n in 4usize..15, tau in 0.0f64..0.5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_prev = coords(n, 3, &mut rng);
        let x_curr = coords(n, 3, &mut rng);
        let e = mask(n, 0.5, &mut rng);
        let d_obs = SquaredDistanceMatrix::new(
            apply_mask(edm_from_coords(&coords(n, 3, &mut rng)).as_matrix(), &e).unwrap(),
        )
        .unwrap();
        let l0 = OutlierMatrix::zeros(n);
        let d = update_d(&x_prev, &l0, &d_obs, &e).unwrap();
        let l = update_l(&x_curr, &x_prev, &d, &l0, &d_obs, &e, tau,
            LUpdateMode::PaperLiteral, ThresholdConvention::PaperTau).unwrap();
        for (i, j) in l.support() {
            prop_assert!(!e.contains(i, j));
        }
    }

    #[test]
    fn d_update_respects_observations(n in 2usize..20, p in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_prev = coords(n, 2, &mut rng);
        let e = mask(n, p, &mut rng);
        let d_obs = SquaredDistanceMatrix::new(
            apply_mask(edm_from_coords(&coords(n, 2, &mut rng)).as_matrix(), &e).unwrap(),
        )
        .unwrap();
        let mut l = DMatrix::zeros(n, n);
        for (i, j) in e.upper_offdiag_pairs() {
            let v = rng.random_range(-1.0..1.0);
            l[(i, j)] = v;
            l[(j, i)] = v;
        }
        let l = OutlierMatrix::new(l).unwrap();
        let d = update_d(&x_prev, &l, &d_obs, &e).unwrap();
        let h = edm_from_coords(&x_prev);
        for i in 0..n {
            for j in 0..n {
                if e.contains(i, j) {
                    prop_assert_eq!(d.get(i, j), d_obs.get(i, j) - l.as_matrix()[(i, j)]);
                } else {
                    prop_assert_eq!(d.get(i, j), h.get(i, j) - l.as_matrix()[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn adagrad_accumulator_never_decreases(steps in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = MlpConfig {
            num_fc_layers: 3,
            hidden_widths: Some(vec![6, 4]),
            weight_init_seed: seed,
            ..MlpConfig::default()
        };
        let mut params = init_mlp(&config, 2, 2).unwrap();
        let mut state = AdagradState::new(&params);
        for _ in 0..steps {
            let input = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let seed_grad = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let (_, cache) = forward(&params, &input);
            let grads = backward(&params, &cache, &seed_grad).unwrap();
            let before = state.clone();
            adagrad_step(&mut params, &mut state, &grads, 0.01, 1e-8);
            for (b, a) in before.accum.layers.iter().zip(&state.accum.layers) {
                prop_assert!(b.weight.iter().zip(a.weight.iter()).all(|(x, y)| y >= x));
                prop_assert!(b.bias.iter().zip(a.bias.iter()).all(|(x, y)| y >= x));
            }
        }
    }
}
