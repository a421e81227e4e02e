//! Executable checks of the identities the training dynamics rely on.
//!
//! The invariance checks train a network on `X` and a second one on the
//! rotated data `OX` with the pushed-forward init `O·W1`. Both see the same
//! preconditioned Gram matrix, so their hidden states and readouts must agree
//! step by step up to round-off.

use std::fmt;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::model::{
    forward, hvp, hvp_step, init_p_isotropic, init_readout, loss, loss_and_grad, per_neuron_hessian, Dims, MlpParams,
};
use crate::optim::{Optimizer, PreconditionerSpec, UpdateRule};
use crate::spectra::{
    covariance, cross_gram, gram, matrix_power, frobenius, random_orthogonal, relative_frobenius, sym_eig, thin_svd, CovarianceScale,
    DEFAULT_FLOOR,
};

pub const INVARIANCE_TOL: f64 = 1e-8;
pub const IDENTITY_TOL: f64 = 1e-9;
pub const HESSIAN_TOL: f64 = 1e-6;
pub const SPAN_TOL: f64 = 1e-8;
pub const GRADIENT_TOL: f64 = 1e-5;
pub const HVP_LINEARITY_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub deviation: f64,
    pub tolerance: f64,
    pub instance: String,
}

impl CheckReport {
    pub fn new(name: &str, deviation: f64, tolerance: f64, instance: String) -> Self {
        CheckReport {
            name: name.to_string(),
            passed: deviation <= tolerance,
            deviation,
            tolerance,
            instance,
        }
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {} deviation={:.3e} tol={:.0e} ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.deviation,
            self.tolerance,
            self.instance
        )
    }
}

fn gaussian<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Full-rank inputs with a spread of row scales, so `Σ^p` is far from a multiple of `I`.
fn anisotropic_inputs<R: Rng>(d_x: usize, n: usize, rng: &mut R) -> Array2<f64> {
    let mut x = gaussian(d_x, n, rng);
    for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        row *= 2f64.powf(1.5 - 3.0 * i as f64 / d_x.max(1) as f64);
    }
    x
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

#[derive(Debug, Clone, Copy)]
pub struct PairedSetup {
    pub d_x: usize,
    pub d_h: usize,
    pub n: usize,
    pub p: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Use `O = I` instead of a random rotation.
    pub identity_rotation: bool,
}

impl PairedSetup {
    pub fn new(p: f64, seed: u64) -> Self {
        PairedSetup {
            d_x: 10,
            d_h: 32,
            n: 50,
            p,
            steps: 100,
            lr: 1e-2,
            seed,
            identity_rotation: false,
        }
    }

    fn describe(&self) -> String {
        format!(
            "d_x={} d_h={} N={} p={} steps={} seed={}{}",
            self.d_x,
            self.d_h,
            self.n,
            self.p,
            self.steps,
            self.seed,
            if self.identity_rotation { " O=I" } else { "" }
        )
    }
}

struct PairedRun {
    /// Max over steps of `‖Z − Z'‖∞` on the training inputs.
    z_train: f64,
    /// Max over steps of the readout gap.
    readout: f64,
    /// Max over steps of `‖z(x) − z'(Ox)‖∞` on the test point.
    z_test: f64,
    /// `|f(x) − f'(Ox)|` after training.
    prediction: f64,
}

fn paired_training(s: &PairedSetup, x_test: Option<&Array1<f64>>) -> Result<PairedRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let x = anisotropic_inputs(s.d_x, s.n, &mut rng);
    let y = gaussian(1, s.n, &mut rng);
    let o = if s.identity_rotation {
        Array2::eye(s.d_x)
    } else {
        random_orthogonal(s.d_x, &mut rng)
    };
    let x_rot = o.dot(&x);

    let scale = CovarianceScale::Sum;
    let pc = matrix_power(&covariance(&x, scale), s.p, DEFAULT_FLOOR)?;
    let pc_rot = matrix_power(&covariance(&x_rot, scale), s.p, DEFAULT_FLOOR)?;
    // keep pre-activations O(1) whatever the power
    let sigma = 1.0 / ((&pc.apply(&x) * &x).sum() / s.n as f64).sqrt();
    let w1 = init_p_isotropic(&pc, sigma, s.d_h, s.seed.wrapping_add(1))?;
    let (w2, b2) = init_readout(s.d_h, 1, s.seed.wrapping_add(2));
    let mut a = MlpParams {
        w1: w1.clone(),
        w2: w2.clone(),
        b2: b2.clone(),
    };
    let mut b = MlpParams { w1: o.dot(&w1), w2, b2 };

    let spec = PreconditionerSpec::new(UpdateRule::CovPower { p: s.p }, s.lr);
    let mut opt_a = Optimizer::new(spec, Some(pc), 0)?;
    let mut opt_b = Optimizer::new(spec, Some(pc_rot), 0)?;

    let test = x_test.map(|v| (v.clone().insert_axis(Axis(1)), o.dot(v).insert_axis(Axis(1))));
    let mut out = PairedRun {
        z_train: 0.0,
        readout: 0.0,
        z_test: 0.0,
        prediction: 0.0,
    };
    for step in 0..=s.steps {
        out.z_train = out.z_train.max(max_abs_diff(&a.w1.t().dot(&x), &b.w1.t().dot(&x_rot)));
        out.readout = out
            .readout
            .max(max_abs_diff(&a.w2, &b.w2))
            .max(a.b2.iter().zip(&b.b2).fold(0.0f64, |m, (p, q)| m.max((p - q).abs())));
        if let Some((xt, xt_rot)) = &test {
            out.z_test = out.z_test.max(max_abs_diff(&a.w1.t().dot(xt), &b.w1.t().dot(xt_rot)));
        }
        if step < s.steps {
            opt_a.step(&mut a, &x, &y)?;
            opt_b.step(&mut b, &x_rot, &y)?;
        }
    }
    if let Some((xt, xt_rot)) = &test {
        out.prediction = max_abs_diff(&forward(&a, xt)?.yhat, &forward(&b, xt_rot)?.yhat);
    }
    Ok(out)
}

/// Paired training on `X` and `OX`: hidden states on the training inputs and
/// the readout parameters must coincide at every step.
pub fn train_trajectory_invariance(setup: &PairedSetup) -> Result<CheckReport> {
    let run = paired_training(setup, None)?;
    Ok(CheckReport::new(
        "train_trajectory_invariance",
        run.z_train.max(run.readout),
        INVARIANCE_TOL,
        setup.describe(),
    ))
}

/// Same pairing plus a test point `x` and its rotation `Ox`: the test-point
/// hidden state and the final prediction must coincide.
pub fn test_point_invariance(setup: &PairedSetup, x_test: &Array1<f64>) -> Result<CheckReport> {
    let run = paired_training(setup, Some(x_test))?;
    Ok(CheckReport::new(
        "test_point_invariance",
        run.z_test.max(run.prediction),
        INVARIANCE_TOL,
        format!("{} |x|={:.3}", setup.describe(), x_test.dot(x_test).sqrt()),
    ))
}

/// Direct `XᵀPX`, `XᵀPx` against their assembly from the thin SVD of `X`.
pub fn spectral_identity_checks(p_list: &[f64], instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for inst in 0..instances {
        let d_x = rng.random_range(2..=8usize);
        let n = d_x + rng.random_range(0..=12usize);
        let x = anisotropic_inputs(d_x, n, &mut rng);
        let point = Array1::from_shape_simple_fn(d_x, || rng.sample(StandardNormal));
        let svd = thin_svd(&x)?;
        let sigma = covariance(&x, CovarianceScale::Sum);
        // β with x = U S β
        let beta = svd.left.t().dot(&point) / &svd.singulars;
        for &p in p_list {
            let pc = matrix_power(&sigma, p, DEFAULT_FLOOR)?;
            let direct = gram(&x, &pc)?;
            let weights = svd.singulars.mapv(|s| s.powf(2.0 * (p + 1.0)));
            let assembled = (&svd.right * &weights.view().insert_axis(Axis(0))).dot(&svd.right.t());
            let g_dev = relative_frobenius(&direct, &assembled);

            let c_direct = cross_gram(&x, &pc, point.view())?;
            let c_assembled = svd.right.dot(&(&weights * &beta));
            let c_dev = (&c_direct - &c_assembled).dot(&(&c_direct - &c_assembled)).sqrt()
                / c_assembled.dot(&c_assembled).sqrt().max(f64::MIN_POSITIVE);

            let instance = format!("instance={inst} d_x={d_x} N={n} p={p}");
            reports.push(CheckReport::new("gram_decomposition", g_dev, IDENTITY_TOL, instance.clone()));
            reports.push(CheckReport::new("cross_gram_decomposition", c_dev, IDENTITY_TOL, instance.clone()));
            if p == -1.0 {
                let idem = relative_frobenius(&direct.dot(&direct), &direct);
                reports.push(CheckReport::new("gram_projector_at_p_minus_one", idem, IDENTITY_TOL, instance.clone()));
            }
            if p == 0.0 {
                let plain = relative_frobenius(&direct, &x.t().dot(&x));
                reports.push(CheckReport::new("gram_plain_at_p_zero", plain, IDENTITY_TOL, instance));
            }
        }
    }
    Ok(reports)
}

/// Whether `θ ± h·v` (with the [`hvp`] step) flips the sign of any pre-activation.
fn probe_crosses_kink(params: &MlpParams, x: &Array2<f64>, v: &MlpParams) -> bool {
    let h = hvp_step(params, v);
    let z = params.w1.t().dot(x);
    let dz = v.w1.t().dot(x);
    z.iter().zip(&dz).any(|(z, dz)| z.abs() <= h * dz.abs())
}

/// Central-difference Hessian block of the loss w.r.t. `W1[:, j]`.
pub fn fd_neuron_hessian(params: &MlpParams, x: &Array2<f64>, y: &Array2<f64>, j: usize, h: f64) -> Result<Array2<f64>> {
    let d = params.dims().d_x;
    let mut out = Array2::zeros((d, d));
    for k in 0..d {
        let mut plus = params.clone();
        plus.w1[[k, j]] += h;
        let mut minus = params.clone();
        minus.w1[[k, j]] -= h;
        let gp = loss_and_grad(&plus, x, y)?.1.dw1;
        let gm = loss_and_grad(&minus, x, y)?.1.dw1;
        for i in 0..d {
            out[[i, k]] = (gp[[i, j]] - gm[[i, j]]) / (2.0 * h);
        }
    }
    Ok(out)
}

fn span_residual(h: &Array2<f64>, x: &Array2<f64>) -> Result<f64> {
    // orthogonal projector onto span{x_i}: eigenvectors of XXᵀ with non-negligible eigenvalue
    let eig = sym_eig(&x.dot(&x.t()))?;
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    let proj = eig.reconstruct_with(|l| if l > 1e-12 * top { 1.0 } else { 0.0 });
    let resid = frobenius(&(h - &proj.dot(h)));
    let scale = frobenius(h);
    Ok(if scale == 0.0 { resid } else { resid / scale })
}

/// Per-neuron Hessian blocks against finite differences, plus the column
/// space check, on instances whose probed neuron is at least `margin` away
/// from every ReLU kink.
pub fn hessian_structure_check(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let margin = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut found = 0;
    let mut attempts = 0;
    while found < instances && attempts < 100 * instances.max(1) {
        attempts += 1;
        let d_x = rng.random_range(3..=8usize);
        // fewer samples than dimensions makes the span condition informative
        let n = if found % 2 == 0 { rng.random_range(1..d_x) } else { rng.random_range(d_x..3 * d_x) };
        let dims = Dims { d_x, d_h: 6, d_y: 2 };
        let x = gaussian(d_x, n, &mut rng);
        let y = gaussian(2, n, &mut rng);
        let params = MlpParams {
            w1: gaussian(d_x, dims.d_h, &mut rng),
            w2: gaussian(dims.d_h, 2, &mut rng),
            b2: Array1::from_shape_simple_fn(2, || rng.sample(StandardNormal)),
        };
        let j = rng.random_range(0..dims.d_h);
        let analytic = per_neuron_hessian(&params, &x, j, margin)?;
        if analytic.near_kink > 0 || analytic.weights.iter().all(|w| *w == 0.0) {
            continue;
        }
        let fd = fd_neuron_hessian(&params, &x, &y, j, 1e-5)?;
        let instance = format!("instance={found} d_x={d_x} N={n} neuron={j}");
        reports.push(CheckReport::new(
            "neuron_hessian_vs_fd",
            relative_frobenius(&analytic.matrix, &fd),
            HESSIAN_TOL,
            instance.clone(),
        ));
        reports.push(CheckReport::new(
            "neuron_hessian_in_input_span",
            span_residual(&analytic.matrix, &x)?,
            SPAN_TOL,
            instance,
        ));
        found += 1;
    }
    Ok(reports)
}

/// Gradient against central differences of the loss, the zero-residual case,
/// and linearity of the finite-difference Hessian-vector product.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_grad = 0.0f64;
    let mut worst_hvp = 0.0f64;
    let mut skipped = 0usize;
    for _ in 0..instances {
        let dims = Dims {
            d_x: rng.random_range(2..=6),
            d_h: rng.random_range(2..=8),
            d_y: rng.random_range(1..=3),
        };
        let n = rng.random_range(3..=12usize);
        let x = gaussian(dims.d_x, n, &mut rng);
        let y = gaussian(dims.d_y, n, &mut rng);
        let params = MlpParams {
            w1: gaussian(dims.d_x, dims.d_h, &mut rng),
            w2: gaussian(dims.d_h, dims.d_y, &mut rng),
            b2: Array1::from_shape_simple_fn(dims.d_y, || rng.sample(StandardNormal)),
        };
        let g = loss_and_grad(&params, &x, &y)?.1.into_params().to_flat();
        let theta = params.to_flat();
        let h = 1e-6;
        let mut fd = Array1::zeros(theta.len());
        for k in 0..theta.len() {
            let mut tp = theta.clone();
            tp[k] += h;
            let mut tm = theta.clone();
            tm[k] -= h;
            let lp = loss(&MlpParams::from_flat(dims, &tp)?, &x, &y)?;
            let lm = loss(&MlpParams::from_flat(dims, &tm)?, &x, &y)?;
            fd[k] = (lp - lm) / (2.0 * h);
        }
        let err = (&g - &fd).dot(&(&g - &fd)).sqrt() / g.dot(&g).sqrt().max(1e-12);
        worst_grad = worst_grad.max(err);

        let v1 = MlpParams::from_flat(dims, &Array1::from_shape_simple_fn(theta.len(), || rng.sample(StandardNormal)))?;
        let v2 = MlpParams::from_flat(dims, &Array1::from_shape_simple_fn(theta.len(), || rng.sample(StandardNormal)))?;
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let combo = v1.zip_map(&v2, |p, q| a * p + b * q);
        // the difference quotient is only linear in v while no ReLU switches inside the probe
        if [&v1, &v2, &combo].iter().any(|v| probe_crosses_kink(&params, &x, v)) {
            skipped += 1;
            continue;
        }
        let lhs = hvp(&params, &x, &y, &combo)?.to_flat();
        let rhs = hvp(&params, &x, &y, &v1)?.to_flat() * a + hvp(&params, &x, &y, &v2)?.to_flat() * b;
        let err = (&lhs - &rhs).dot(&(&lhs - &rhs)).sqrt() / rhs.dot(&rhs).sqrt().max(1e-12);
        worst_hvp = worst_hvp.max(err);
    }

    // a readout that reproduces the targets exactly has zero gradient
    let dims = Dims { d_x: 3, d_h: 4, d_y: 2 };
    let x = gaussian(3, 5, &mut rng);
    let w1 = gaussian(3, 4, &mut rng);
    let (w2, b2) = init_readout(4, 2, seed);
    let zero_res = MlpParams { w1, w2, b2 };
    let y = forward(&zero_res, &x)?.yhat;
    let g0 = loss_and_grad(&zero_res, &x, &y)?.1.into_params().norm();
    debug_assert_eq!(zero_res.dims(), dims);

    Ok(vec![
        CheckReport::new(
            "gradient_vs_fd",
            worst_grad,
            GRADIENT_TOL,
            format!("{instances} random instances, max relative error"),
        ),
        CheckReport::new("zero_residual_gradient", g0, 1e-12, "targets = predictions".into()),
        CheckReport::new(
            "hvp_linearity",
            worst_hvp,
            HVP_LINEARITY_TOL,
            format!("{} random instances ({skipped} straddling a kink skipped), max relative error", instances - skipped),
        ),
    ])
}

/// The full suite at the default sizes.
pub fn run_suite(cfg: &crate::runners::config::VerifyConfig) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();
    for &p in &cfg.p_list {
        let mut setup = PairedSetup::new(p, cfg.seed);
        setup.steps = cfg.steps;
        reports.push(train_trajectory_invariance(&setup)?);
        let x_test = Array1::from_shape_simple_fn(setup.d_x, || rng.sample(StandardNormal));
        reports.push(test_point_invariance(&setup, &x_test)?);
    }
    reports.extend(spectral_identity_checks(&cfg.identity_p_list, cfg.instances, cfg.seed)?);
    reports.extend(hessian_structure_check(10, cfg.seed)?);
    reports.extend(gradient_suite(cfg.instances, cfg.seed)?);
    Ok(reports)
}
