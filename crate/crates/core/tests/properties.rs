use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use precond_lab::data::{build_ood, make_spectrum, make_teacher, synth_generate, Case, LabeledImages, OodSizes};
use precond_lab::model::{init_p_isotropic, init_readout, loss, MlpParams};
use precond_lab::optim::{ridge_closed_form, ridge_objective, Optimizer, PreconditionerSpec, UpdateRule};
use precond_lab::runners::derive_seed;
use precond_lab::runners::output::fmt_f;
use precond_lab::spectra::{
    covariance, cross_gram, gram, matrix_power, relative_frobenius, sym_eig, thin_svd, CovarianceScale,
    Preconditioner,
};

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Well-conditioned full-row-rank data: `d × n` with `n ≥ d + 2`.
fn data(d: usize, extra: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian(d, d + 2 + extra, &mut rng)
}

fn small_model(d_x: usize, d_h: usize, d_y: usize, seed: u64) -> MlpParams {
    let w1 = init_p_isotropic(&Preconditioner::identity(d_x), 1.0 / (d_x as f64).sqrt(), d_h, seed).unwrap();
    let (w2, b2) = init_readout(d_h, d_y, seed + 1);
    MlpParams { w1, w2, b2 }
}

fn run(rule: UpdateRule, pc: Option<Preconditioner>, params: &MlpParams, x: &Array2<f64>, y: &Array2<f64>, steps: usize) -> MlpParams {
    let spec = PreconditionerSpec::new(rule, 1e-2).with_weight_decay(1e-6);
    let mut opt = Optimizer::new(spec, pc, 99).unwrap();
    let mut p = params.clone();
    for _ in 0..steps {
        opt.step(&mut p, x, y).unwrap();
    }
    p
}

fn max_abs_diff(a: &MlpParams, b: &MlpParams) -> f64 {
    (&a.to_flat() - &b.to_flat()).iter().fold(0.0, |m, v| m.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn powers_compose(d in 2usize..7, extra in 0usize..10, seed in 0u64..1000, p in -2.0f64..1.0, q in -1.0f64..1.0) {
        let x = data(d, extra, seed);
        let sigma = covariance(&x, CovarianceScale::Mean);
        let a = matrix_power(&sigma, p, 0.0).unwrap().matrix;
        let b = matrix_power(&sigma, q, 0.0).unwrap().matrix;
        let ab = matrix_power(&sigma, p + q, 0.0).unwrap().matrix;
        prop_assert!(relative_frobenius(&a.dot(&b), &ab) < 1e-8);
    }

    #[test]
    fn eigendecomposition_reconstructs(d in 1usize..9, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = gaussian(d, d, &mut rng);
        let a = &m + &m.t();
        let eig = sym_eig(&a).unwrap();
        prop_assert!(relative_frobenius(&eig.reconstruct(), &a) < 1e-10);
        let vtv = eig.eigenvectors.t().dot(&eig.eigenvectors);
        prop_assert!(relative_frobenius(&vtv, &Array2::eye(d)) < 1e-10);
        for w in eig.eigenvalues.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn gram_is_svd_reweighting(d in 2usize..7, extra in 0usize..10, seed in 0u64..1000, p in -2.0f64..1.0) {
        let x = data(d, extra, seed);
        let pc = matrix_power(&covariance(&x, CovarianceScale::Sum), p, 0.0).unwrap();
        let svd = thin_svd(&x).unwrap();
        let weights = svd.singulars.mapv(|s| s.powf(2.0 * (p + 1.0)));
        let assembled = (&svd.right * &weights.view().insert_axis(ndarray::Axis(0))).dot(&svd.right.t());
        prop_assert!(relative_frobenius(&gram(&x, &pc).unwrap(), &assembled) < 1e-9);
    }

    #[test]
    fn cross_gram_is_linear_in_the_point(d in 2usize..7, seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = data(d, 3, seed);
        let pc = matrix_power(&covariance(&x, CovarianceScale::Sum), -1.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let u = Array1::from_shape_simple_fn(d, || rng.sample(StandardNormal));
        let v = Array1::from_shape_simple_fn(d, || rng.sample(StandardNormal));
        let combo = &u * a + &v * b;
        let lhs = cross_gram(&x, &pc, combo.view()).unwrap();
        let rhs = cross_gram(&x, &pc, u.view()).unwrap() * a + cross_gram(&x, &pc, v.view()).unwrap() * b;
        let err = (&lhs - &rhs).iter().fold(0.0f64, |m, e| m.max(e.abs()));
        prop_assert!(err < 1e-9 * (1.0 + rhs.iter().fold(0.0f64, |m, e| m.max(e.abs()))));
    }

    #[test]
    fn zero_power_steppers_follow_gd(d_x in 2usize..6, d_h in 2usize..8, seed in 0u64..500) {
        let x = data(d_x, 6, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        let y = gaussian(1, x.ncols(), &mut rng);
        let params = small_model(d_x, d_h, 1, seed);
        let gd = run(UpdateRule::Gd, None, &params, &x, &y, 50);
        let pc = matrix_power(&covariance(&x, CovarianceScale::Sum), 0.0, 0.0).unwrap();
        let cov = run(UpdateRule::CovPower { p: 0.0 }, Some(pc), &params, &x, &y, 50);
        let ada = run(
            UpdateRule::Adahessian { p: 0.0, beta1: 0.0, beta2: 0.0, hutchinson_samples: 1 },
            None,
            &params,
            &x,
            &y,
            50,
        );
        let sam = run(UpdateRule::SamGd { rho: 0.0 }, None, &params, &x, &y, 50);
        prop_assert!(max_abs_diff(&gd, &cov) <= 1e-12);
        prop_assert!(max_abs_diff(&gd, &ada) <= 1e-12);
        prop_assert!(max_abs_diff(&gd, &sam) <= 1e-12);
    }

    #[test]
    fn steppers_are_deterministic(seed in 0u64..500, which in 0usize..5) {
        let x = data(4, 6, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        let y = gaussian(2, x.ncols(), &mut rng);
        let params = small_model(4, 5, 2, seed);
        let rule = [
            UpdateRule::Gd,
            UpdateRule::CovPower { p: -1.0 },
            UpdateRule::Adahessian { p: -1.0, beta1: 0.9, beta2: 0.999, hutchinson_samples: 2 },
            UpdateRule::Adam { beta1: 0.9, beta2: 0.999 },
            UpdateRule::SamGd { rho: 0.05 },
        ][which];
        let pc = || match rule {
            UpdateRule::CovPower { p } => Some(matrix_power(&covariance(&x, CovarianceScale::Sum), p, 1e-10).unwrap()),
            _ => None,
        };
        let a = run(rule, pc(), &params, &x, &y, 10);
        let b = run(rule, pc(), &params, &x, &y, 10);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn small_gd_steps_reduce_the_loss(seed in 0u64..500) {
        let x = data(3, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        let y = gaussian(1, x.ncols(), &mut rng);
        let params = small_model(3, 6, 1, seed);
        let before = loss(&params, &x, &y).unwrap();
        let spec = PreconditionerSpec::new(UpdateRule::Gd, 1e-3).with_weight_decay(0.0);
        let mut opt = Optimizer::new(spec, None, 0).unwrap();
        let mut p = params.clone();
        opt.step(&mut p, &x, &y).unwrap();
        prop_assert!(loss(&p, &x, &y).unwrap() <= before);
    }

    #[test]
    fn ridge_beats_perturbations(d_h in 1usize..6, n in 2usize..20, lambda in 0.0f64..10.0, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = gaussian(d_h, n, &mut rng);
        let y = gaussian(2, n, &mut rng);
        let lambda = if n <= d_h { lambda + 0.1 } else { lambda };
        let fit = ridge_closed_form(&h, &y, lambda).unwrap();
        let best = ridge_objective(&h, &y, &fit.w2, &fit.b2, lambda);
        for _ in 0..50 {
            let dw = gaussian(d_h, 2, &mut rng) * 1e-3;
            let db = Array1::from_shape_simple_fn(2, || 1e-3 * rng.sample::<f64, _>(StandardNormal));
            prop_assert!(ridge_objective(&h, &y, &(&fit.w2 + &dw), &(&fit.b2 + &db), lambda) >= best - 1e-9);
        }
    }

    #[test]
    fn float_cells_round_trip(v in proptest::num::f64::NORMAL | proptest::num::f64::ZERO) {
        prop_assert_eq!(fmt_f(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn seed_derivation_separates_inputs(a in "[a-z]{1,6}", b in "[a-z]{1,6}") {
        prop_assert_eq!(derive_seed(&[&a, &b]), derive_seed(&[&a, &b]));
        if a != b {
            prop_assert_ne!(derive_seed(&[&a]), derive_seed(&[&b]));
        }
        // length prefixes keep ("ab", "c") apart from ("a", "bc")
        let joined = format!("{a}{b}");
        prop_assert_ne!(derive_seed(&[&a, &b]), derive_seed(&[&joined]));
    }

    #[test]
    fn synthetic_inputs_are_mixed_latents(case_high in any::<bool>(), n in 2usize..40, snr in 0.5f64..5.0, seed in 0u64..1000) {
        let case = if case_high { Case::High } else { Case::Low };
        let spectrum = make_spectrum(case, 10, 10.0).unwrap();
        let teacher = make_teacher(case, 10).unwrap();
        let (ds, calibrated) = synth_generate(&spectrum, &teacher, n, snr, seed, "prop").unwrap();
        prop_assert!(relative_frobenius(&spectrum.mixing().dot(&ds.beta), &ds.x) < 1e-12);
        prop_assert!(calibrated.sigma_noise >= 0.0);
    }

    #[test]
    fn ood_train_split_carries_its_class_pattern(sigma in 0.0f64..0.15, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 60;
        let images = Array2::from_shape_simple_fn((12, n), || 0.5 + 0.1 * rng.random::<f64>());
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        let source = LabeledImages { images, labels, shape: (3, 4) };
        let ds = build_ood(&source, sigma, seed, OodSizes { train: 20, val: 10, test: 15 }).unwrap();
        // pixel values sit far from the clamp range, so the offset is exact
        for (col, &idx) in ds.train.source_index.iter().enumerate() {
            let c = ds.train.labels[col];
            let offset = &ds.train.x.column(col) - &source.images.column(idx);
            let err = (&offset - &ds.noise_bank.row(c)).iter().fold(0.0f64, |m, e| m.max(e.abs()));
            prop_assert!(err < 1e-12);
            prop_assert_eq!(ds.test_flip_noise.labels.len(), 15);
        }
    }
}
