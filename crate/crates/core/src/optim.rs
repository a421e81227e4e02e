//! Update rules and the closed-form ridge readout.
//!
//! All steppers take the full training batch and use coupled L2 weight decay
//! (`g ← ∇L + wd·θ`). For the covariance-power rule the decay term is added to
//! the first-layer gradient before it is multiplied by `P`.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{hvp, loss_and_grad, MlpParams};
use crate::spectra::{sym_eig, Preconditioner, DEFAULT_FLOOR};

pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_RHO: f64 = 0.05;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateRule {
    Gd,
    /// `P = Σ^p` on the first layer, plain GD on the readout.
    CovPower { p: f64 },
    /// Hutchinson diagonal-Hessian preconditioning raised to the power `p`.
    Adahessian {
        p: f64,
        beta1: f64,
        beta2: f64,
        hutchinson_samples: usize,
    },
    Adam { beta1: f64, beta2: f64 },
    SamGd { rho: f64 },
}

impl UpdateRule {
    pub fn name(&self) -> &'static str {
        match self {
            UpdateRule::Gd => "gd",
            UpdateRule::CovPower { .. } => "cov_power",
            UpdateRule::Adahessian { .. } => "adahessian",
            UpdateRule::Adam { .. } => "adam",
            UpdateRule::SamGd { .. } => "sam_gd",
        }
    }

    pub fn power(&self) -> Option<f64> {
        match self {
            UpdateRule::CovPower { p } | UpdateRule::Adahessian { p, .. } => Some(*p),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreconditionerSpec {
    pub rule: UpdateRule,
    pub lr: f64,
    pub weight_decay: f64,
    /// Denominator damping for Adam / AdaHessian.
    pub eps: f64,
}

impl PreconditionerSpec {
    pub fn new(rule: UpdateRule, lr: f64) -> Self {
        PreconditionerSpec {
            rule,
            lr,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            eps: DEFAULT_EPS,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LabError::InvalidArgument(msg));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        let betas_ok = |b1: f64, b2: f64| (0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2);
        match self.rule {
            UpdateRule::Adahessian {
                beta1,
                beta2,
                hutchinson_samples,
                p,
            } => {
                if !betas_ok(beta1, beta2) {
                    return bad(format!("betas must lie in [0, 1), got ({beta1}, {beta2})"));
                }
                if hutchinson_samples == 0 {
                    return bad("hutchinson_samples must be >= 1".into());
                }
                if !p.is_finite() {
                    return bad(format!("power must be finite, got {p}"));
                }
            }
            UpdateRule::Adam { beta1, beta2 } if !betas_ok(beta1, beta2) => {
                return bad(format!("betas must lie in [0, 1), got ({beta1}, {beta2})"));
            }
            UpdateRule::SamGd { rho } if !(rho >= 0.0) => {
                return bad(format!("SAM radius must be >= 0, got {rho}"));
            }
            UpdateRule::CovPower { p } if !p.is_finite() => {
                return bad(format!("power must be finite, got {p}"));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub t: u64,
    pub m: Option<MlpParams>,
    pub v: Option<MlpParams>,
    pub precond: Option<Preconditioner>,
    pub rng: ChaCha8Rng,
}

impl OptimState {
    pub fn new(seed: u64) -> Self {
        OptimState {
            t: 0,
            m: None,
            v: None,
            precond: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Diagnostics returned by every step.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    /// Training loss at the parameters before the update.
    pub loss: f64,
}

fn decayed_gradient(params: &MlpParams, grad: MlpParams, wd: f64) -> MlpParams {
    let mut g = grad;
    if wd != 0.0 {
        g.scaled_add(wd, params);
    }
    g
}

fn expect_rule(spec: &PreconditionerSpec, kind: &'static str) -> Result<()> {
    if spec.rule.name() != kind {
        return Err(LabError::InvalidArgument(format!(
            "stepper `{kind}` called with rule `{}`",
            spec.rule.name()
        )));
    }
    Ok(())
}

/// `θ ← θ − η (∇L + wd·θ)`
pub fn step_gd(
    params: &mut MlpParams,
    x: &Array2<f64>,
    y: &Array2<f64>,
    spec: &PreconditionerSpec,
    state: &mut OptimState,
) -> Result<StepInfo> {
    let (loss, grads) = loss_and_grad(params, x, y)?;
    let g = decayed_gradient(params, grads.into_params(), spec.weight_decay);
    params.scaled_add(-spec.lr, &g);
    state.t += 1;
    Ok(StepInfo { loss })
}

/// `W1 ← W1 − η P (X ∂L/∂Zᵀ + wd·W1)`, readout by plain GD.
pub fn step_cov_power(
    params: &mut MlpParams,
    x: &Array2<f64>,
    y: &Array2<f64>,
    spec: &PreconditionerSpec,
    state: &mut OptimState,
) -> Result<StepInfo> {
    expect_rule(spec, "cov_power")?;
    let precond = state
        .precond
        .as_ref()
        .ok_or_else(|| LabError::InvalidArgument("cov_power state has no preconditioner".into()))?;
    if precond.dim() != x.nrows() || precond.dim() != params.w1.nrows() {
        return Err(LabError::dim("cov_power preconditioner", x.nrows(), precond.dim()));
    }
    let (loss, grads) = loss_and_grad(params, x, y)?;
    let mut g = decayed_gradient(params, grads.into_params(), spec.weight_decay);
    g.w1 = precond.apply(&g.w1);
    params.scaled_add(-spec.lr, &g);
    state.t += 1;
    Ok(StepInfo { loss })
}

fn rademacher<R: Rng + ?Sized>(like: &MlpParams, rng: &mut R) -> MlpParams {
    let mut draw = || if rng.random::<bool>() { 1.0 } else { -1.0 };
    MlpParams {
        w1: like.w1.mapv(|_| draw()),
        w2: like.w2.mapv(|_| draw()),
        b2: like.b2.mapv(|_| draw()),
    }
}

/// Hutchinson estimate `mean_k r_k ⊙ H r_k` with Rademacher `r_k`, for any
/// Hessian-vector product `hv`.
pub fn hutchinson_with<R, F>(like: &MlpParams, samples: usize, rng: &mut R, mut hv: F) -> Result<MlpParams>
where
    R: Rng + ?Sized,
    F: FnMut(&MlpParams) -> Result<MlpParams>,
{
    let mut diag = MlpParams::zeros(like.dims());
    for _ in 0..samples {
        let r = rademacher(like, rng);
        let hr = hv(&r)?;
        diag.scaled_add(1.0 / samples as f64, &r.zip_map(&hr, |a, b| a * b));
    }
    Ok(diag)
}

/// Hutchinson diagonal of the training-loss Hessian.
pub fn hutchinson_diagonal<R: Rng + ?Sized>(
    params: &MlpParams,
    x: &Array2<f64>,
    y: &Array2<f64>,
    samples: usize,
    rng: &mut R,
) -> Result<MlpParams> {
    hutchinson_with(params, samples, rng, |r| hvp(params, x, y, r))
}

/// AdaHessian with a tunable exponent:
/// `θ ← θ − η m̂ ⊙ (√v̂ + ε)^p`, `v` tracking the squared Hutchinson diagonal.
///
/// `p = −1` is the usual AdaHessian denominator; `p = 0` with `β1 = 0` is GD.
/// For `p = −2` the gain on a coordinate with curvature `D` is
/// `D / (D + ε)²`, at most `1 / (4ε)`, so ε sets the stability margin.
pub fn step_adahessian(
    params: &mut MlpParams,
    x: &Array2<f64>,
    y: &Array2<f64>,
    spec: &PreconditionerSpec,
    state: &mut OptimState,
) -> Result<StepInfo> {
    let UpdateRule::Adahessian {
        p,
        beta1,
        beta2,
        hutchinson_samples,
    } = spec.rule
    else {
        return expect_rule(spec, "adahessian").map(|_| unreachable!());
    };
    let (loss, grads) = loss_and_grad(params, x, y)?;
    let g = decayed_gradient(params, grads.into_params(), spec.weight_decay);
    let diag = hutchinson_diagonal(params, x, y, hutchinson_samples, &mut state.rng)?;
    if !diag.is_finite() {
        return Err(LabError::NonFinite(format!(
            "Hutchinson diagonal at step {} (loss {loss:.3e})",
            state.t + 1
        )));
    }
    adahessian_update(params, &g, &diag, (p, beta1, beta2), spec, state);
    Ok(StepInfo { loss })
}

fn adahessian_update(
    params: &mut MlpParams,
    g: &MlpParams,
    diag: &MlpParams,
    (p, beta1, beta2): (f64, f64, f64),
    spec: &PreconditionerSpec,
    state: &mut OptimState,
) {
    let zeros = || MlpParams::zeros(params.dims());
    let m = state.m.get_or_insert_with(zeros);
    *m = m.zip_map(g, |m, g| beta1 * m + (1.0 - beta1) * g);
    let v = state.v.get_or_insert_with(zeros);
    *v = v.zip_map(diag, |v, d| beta2 * v + (1.0 - beta2) * d * d);
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    let eps = spec.eps;
    let scale = v.map(|v| ((v / bc2).sqrt() + eps).powf(p));
    let update = m.zip_map(&scale, |m, s| m / bc1 * s);
    params.scaled_add(-spec.lr, &update);
}

/// Bias-corrected Adam, `Δθ = −η m̂ / (√v̂ + ε)`.
pub fn step_adam(
    params: &mut MlpParams,
    x: &Array2<f64>,
    y: &Array2<f64>,
    spec: &PreconditionerSpec,
    state: &mut OptimState,
) -> Result<StepInfo> {
    let UpdateRule::Adam { beta1, beta2 } = spec.rule else {
        return expect_rule(spec, "adam").map(|_| unreachable!());
    };
    let (loss, grads) = loss_and_grad(params, x, y)?;
    let g = decayed_gradient(params, grads.into_params(), spec.weight_decay);
    adam_update(params, &g, beta1, beta2, spec, state);
    Ok(StepInfo { loss })
}

fn adam_update(
    params: &mut MlpParams,
    g: &MlpParams,
    beta1: f64,
    beta2: f64,
    spec: &PreconditionerSpec,
    state: &mut OptimState,
) {
    let zeros = || MlpParams::zeros(params.dims());
    let m = state.m.get_or_insert_with(zeros);
    *m = m.zip_map(g, |m, g| beta1 * m + (1.0 - beta1) * g);
    let v = state.v.get_or_insert_with(zeros);
    *v = v.zip_map(g, |v, g| beta2 * v + (1.0 - beta2) * g * g);
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    let eps = spec.eps;
    let update = m.zip_map(v, |m, v| (m / bc1) / ((v / bc2).sqrt() + eps));
    params.scaled_add(-spec.lr, &update);
}

/// Sharpness-aware minimization around plain GD.
pub fn step_sam(
    params: &mut MlpParams,
    x: &Array2<f64>,
    y: &Array2<f64>,
    spec: &PreconditionerSpec,
    state: &mut OptimState,
) -> Result<StepInfo> {
    let UpdateRule::SamGd { rho } = spec.rule else {
        return expect_rule(spec, "sam_gd").map(|_| unreachable!());
    };
    let (loss, grads) = loss_and_grad(params, x, y)?;
    let g = grads.into_params();
    let gnorm = g.norm();
    let descent = if gnorm < 1e-12 {
        g
    } else {
        let mut perturbed = params.clone();
        perturbed.scaled_add(rho / gnorm, &g);
        loss_and_grad(&perturbed, x, y)?.1.into_params()
    };
    let descent = decayed_gradient(params, descent, spec.weight_decay);
    params.scaled_add(-spec.lr, &descent);
    state.t += 1;
    Ok(StepInfo { loss })
}

/// A stepper bound to its rule and state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub spec: PreconditionerSpec,
    pub state: OptimState,
}

impl Optimizer {
    /// `precond` is required for `cov_power` and ignored otherwise.
    pub fn new(spec: PreconditionerSpec, precond: Option<Preconditioner>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut state = OptimState::new(seed);
        if let UpdateRule::CovPower { .. } = spec.rule {
            state.precond = Some(precond.ok_or_else(|| {
                LabError::InvalidArgument("cov_power needs a preconditioner built from the training inputs".into())
            })?);
        }
        Ok(Optimizer { spec, state })
    }

    pub fn step(&mut self, params: &mut MlpParams, x: &Array2<f64>, y: &Array2<f64>) -> Result<StepInfo> {
        let (spec, state) = (&self.spec, &mut self.state);
        match spec.rule {
            UpdateRule::Gd => step_gd(params, x, y, spec, state),
            UpdateRule::CovPower { .. } => step_cov_power(params, x, y, spec, state),
            UpdateRule::Adahessian { .. } => step_adahessian(params, x, y, spec, state),
            UpdateRule::Adam { .. } => step_adam(params, x, y, spec, state),
            UpdateRule::SamGd { .. } => step_sam(params, x, y, spec, state),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RidgeFit {
    /// `d_h × d_y`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// Set when `λ = 0` met a singular system and the eigen-floored
    /// pseudo-inverse was used.
    pub pseudo_inverse: bool,
}

/// Centered ridge regression `min Σ_i ‖W2ᵀh_i + b2 − y_i‖² + λ‖W2‖²_F`,
/// factored once so a whole regularization grid is cheap.
#[derive(Debug, Clone)]
pub struct RidgePath {
    eigvals: Array1<f64>,
    eigvecs: Array2<f64>,
    /// `Vᵀ H̃ Ỹᵀ`
    projected: Array2<f64>,
    h_mean: Array1<f64>,
    y_mean: Array1<f64>,
}

impl RidgePath {
    pub fn new(h: &Array2<f64>, y: &Array2<f64>) -> Result<Self> {
        if h.ncols() != y.ncols() {
            return Err(LabError::dim("ridge samples", h.ncols(), y.ncols()));
        }
        if h.ncols() == 0 {
            return Err(LabError::InvalidArgument("ridge regression needs N >= 1".into()));
        }
        let h_mean = h.mean_axis(Axis(1)).expect("non-empty");
        let y_mean = y.mean_axis(Axis(1)).expect("non-empty");
        let hc = h - &h_mean.view().insert_axis(Axis(1));
        let yc = y - &y_mean.view().insert_axis(Axis(1));
        let mut gram = hc.dot(&hc.t());
        let gt = gram.t().to_owned();
        gram += &gt;
        gram *= 0.5;
        let eig = sym_eig(&gram)?;
        let projected = eig.eigenvectors.t().dot(&hc.dot(&yc.t()));
        Ok(RidgePath {
            eigvals: eig.eigenvalues,
            eigvecs: eig.eigenvectors,
            projected,
            h_mean,
            y_mean,
        })
    }

    pub fn solve(&self, lambda: f64) -> Result<RidgeFit> {
        if !(lambda >= 0.0) {
            return Err(LabError::InvalidArgument(format!("ridge λ must be >= 0, got {lambda}")));
        }
        let lmax = self.eigvals.iter().fold(0.0f64, |m, &l| m.max(l));
        let cutoff = DEFAULT_FLOOR * lmax;
        let mut pseudo_inverse = false;
        let inv = self.eigvals.mapv(|l| {
            let l = l.max(0.0);
            if lambda > 0.0 {
                1.0 / (l + lambda)
            } else if l > cutoff {
                1.0 / l
            } else {
                pseudo_inverse = true;
                0.0
            }
        });
        let w2 = self.eigvecs.dot(&(&self.projected * &inv.view().insert_axis(Axis(1))));
        let b2 = &self.y_mean - &w2.t().dot(&self.h_mean);
        Ok(RidgeFit { w2, b2, pseudo_inverse })
    }
}

pub fn ridge_closed_form(h: &Array2<f64>, y: &Array2<f64>, lambda: f64) -> Result<RidgeFit> {
    RidgePath::new(h, y)?.solve(lambda)
}

/// The objective minimized by [`ridge_closed_form`].
pub fn ridge_objective(h: &Array2<f64>, y: &Array2<f64>, w2: &Array2<f64>, b2: &Array1<f64>, lambda: f64) -> f64 {
    let pred = w2.t().dot(h) + &b2.view().insert_axis(Axis(1));
    let resid: f64 = (&pred - y).mapv(|v| v * v).sum();
    resid + lambda * w2.mapv(|v| v * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_readout, Dims};
    use crate::spectra::matrix_power;
    use ndarray::array;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
    }

    fn setup(seed: u64) -> (MlpParams, Array2<f64>, Array2<f64>) {
        let dims = Dims { d_x: 3, d_h: 6, d_y: 1 };
        let (w2, b2) = init_readout(dims.d_h, dims.d_y, seed);
        let params = MlpParams {
            w1: gaussian(3, 6, seed + 1),
            w2,
            b2,
        };
        (params, gaussian(3, 12, seed + 2), gaussian(1, 12, seed + 3))
    }

    fn cov_spec(p: f64, lr: f64) -> PreconditionerSpec {
        PreconditionerSpec::new(UpdateRule::CovPower { p }, lr)
    }

    #[test]
    fn cov_power_zero_is_gd() {
        let (params, x, y) = setup(1);
        let spec = cov_spec(0.0, 0.05);
        let precond = matrix_power(&x.dot(&x.t()), 0.0, DEFAULT_FLOOR).unwrap();
        let mut a = params.clone();
        let mut opt = Optimizer::new(spec, Some(precond), 0).unwrap();
        let mut b = params.clone();
        let gd = PreconditionerSpec { rule: UpdateRule::Gd, ..spec };
        let mut gd_opt = Optimizer::new(gd, None, 0).unwrap();
        for _ in 0..5 {
            opt.step(&mut a, &x, &y).unwrap();
            gd_opt.step(&mut b, &x, &y).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn cov_power_no_gradient_no_move() {
        let (mut params, x, _) = setup(2);
        let y = crate::model::predict(&params, &x).unwrap();
        let spec = cov_spec(-1.0, 0.1).with_weight_decay(0.0);
        let precond = matrix_power(&x.dot(&x.t()), -1.0, DEFAULT_FLOOR).unwrap();
        let before = params.clone();
        let mut opt = Optimizer::new(spec, Some(precond), 0).unwrap();
        opt.step(&mut params, &x, &y).unwrap();
        assert_eq!(params, before);
        assert_eq!(opt.state.t, 1);
    }

    #[test]
    fn cov_power_diagonal_scaling() {
        let (params, _, _) = setup(3);
        let params = MlpParams {
            w1: params.w1.slice(ndarray::s![0..2, ..]).to_owned(),
            ..params
        };
        let x = gaussian(2, 12, 30);
        let y = gaussian(1, 12, 31);
        let sigma = array![[10.0, 0.0], [0.0, 0.1]];
        let precond = matrix_power(&sigma, -1.0, 0.0).unwrap();
        let spec = cov_spec(-1.0, 0.01).with_weight_decay(0.0);
        let (_, grads) = loss_and_grad(&params, &x, &y).unwrap();
        let mut stepped = params.clone();
        step_cov_power(&mut stepped, &x, &y, &spec, &mut OptimState {
            precond: Some(precond),
            ..OptimState::new(0)
        })
        .unwrap();
        for (r, factor) in [(0usize, 0.1), (1, 10.0)] {
            for j in 0..6 {
                let expected = params.w1[[r, j]] - 0.01 * factor * grads.dw1[[r, j]];
                assert!((stepped.w1[[r, j]] - expected).abs() < 1e-14);
            }
        }
        // the readout takes a plain GD step
        let expected_w2 = &params.w2 - &(&grads.dw2 * 0.01);
        assert!((&stepped.w2 - &expected_w2).mapv(f64::abs).sum() < 1e-14);
    }

    #[test]
    fn cov_power_rejects_mismatched_preconditioner() {
        let (mut params, x, y) = setup(4);
        let spec = cov_spec(-1.0, 0.01);
        let mut state = OptimState {
            precond: Some(Preconditioner {
                matrix: Array2::eye(4),
                power: -1.0,
                floor: 0.0,
            }),
            ..OptimState::new(0)
        };
        assert!(step_cov_power(&mut params, &x, &y, &spec, &mut state).is_err());
        assert!(Optimizer::new(spec, None, 0).is_err());
    }

    fn adahessian(p: f64, beta1: f64, beta2: f64) -> UpdateRule {
        UpdateRule::Adahessian {
            p,
            beta1,
            beta2,
            hutchinson_samples: 1,
        }
    }

    #[test]
    fn adahessian_zero_power_is_gd() {
        let (params, x, y) = setup(5);
        let mut a = params.clone();
        let mut b = params.clone();
        let mut ada = Optimizer::new(PreconditionerSpec::new(adahessian(0.0, 0.0, 0.999), 0.05), None, 7).unwrap();
        let mut gd = Optimizer::new(PreconditionerSpec::new(UpdateRule::Gd, 0.05), None, 7).unwrap();
        for _ in 0..5 {
            ada.step(&mut a, &x, &y).unwrap();
            gd.step(&mut b, &x, &y).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn adahessian_deterministic_per_seed() {
        let (params, x, y) = setup(6);
        let spec = PreconditionerSpec::new(adahessian(-1.0, 0.9, 0.999), 0.01);
        let run = |seed| {
            let mut p = params.clone();
            let mut opt = Optimizer::new(spec, None, seed).unwrap();
            for _ in 0..4 {
                opt.step(&mut p, &x, &y).unwrap();
            }
            p
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn adahessian_newton_like_on_scalar_quadratic() {
        // L(w) = a·w², H = 2a: every Rademacher probe gives r·(2a·r) = 2a exactly
        let a = 3.5;
        let w0 = 0.8;
        let like = MlpParams {
            w1: array![[w0]],
            w2: Array2::zeros((1, 0)),
            b2: Array1::zeros(0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let diag = hutchinson_with(&like, 3, &mut rng, |r| Ok(r.map(|v| 2.0 * a * v))).unwrap();
        assert!((diag.w1[[0, 0]] - 2.0 * a).abs() < 1e-12);

        let spec = PreconditionerSpec {
            rule: adahessian(-1.0, 0.0, 0.0),
            lr: 0.5,
            weight_decay: 0.0,
            eps: 1e-12,
        };
        let g = like.map(|w| 2.0 * a * w);
        let mut params = like.clone();
        adahessian_update(&mut params, &g, &diag, (-1.0, 0.0, 0.0), &spec, &mut OptimState::new(0));
        let expected = w0 - 0.5 * (2.0 * a * w0) / (2.0 * a);
        assert!((params.w1[[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn adahessian_inverse_square_gain_is_bounded_by_eps() {
        // one coordinate, exact diagonal D, gradient D·w: the step D·w/(D + ε)² never exceeds w/(4ε)
        let eps = 1e-3;
        let w0 = 1.0;
        for d in [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
            let like = MlpParams {
                w1: array![[w0]],
                w2: Array2::zeros((1, 0)),
                b2: Array1::zeros(0),
            };
            let spec = PreconditionerSpec {
                rule: adahessian(-2.0, 0.0, 0.0),
                lr: 1.0,
                weight_decay: 0.0,
                eps,
            };
            let mut params = like.clone();
            let g = like.map(|w| d * w);
            let diag = like.map(|_| d);
            adahessian_update(&mut params, &g, &diag, (-2.0, 0.0, 0.0), &spec, &mut OptimState::new(0));
            let step = w0 - params.w1[[0, 0]];
            let expected = d * w0 / ((d + eps) * (d + eps));
            assert!((step - expected).abs() < 1e-12 * expected.max(1.0));
            assert!(step / w0 <= 1.0 / (4.0 * eps) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn hutchinson_diagonal_of_readout_block() {
        // With W1 fixed at positive pre-activations the exact readout diagonal is (2/N)Σ h².
        let params = MlpParams {
            w1: array![[1.0]],
            w2: array![[0.3]],
            b2: array![0.0],
        };
        let x = array![[0.5, 1.0, 2.0]];
        let y = array![[1.0, 0.0, 2.0]];
        let mut e = MlpParams::zeros(params.dims());
        e.w2[[0, 0]] = 1.0;
        let exact = 2.0 * (0.25 + 1.0 + 4.0) / 3.0;
        let d = hvp(&params, &x, &y, &e).unwrap().w2[[0, 0]];
        assert!((d - exact).abs() < 1e-6 * exact, "{d} vs {exact}");
        // averaging many probes converges to the diagonal
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let est = hutchinson_diagonal(&params, &x, &y, 4000, &mut rng).unwrap();
        assert!((est.w2[[0, 0]] - exact).abs() < 0.1 * exact);
    }

    #[test]
    fn adahessian_rejects_non_finite_diagonal() {
        let (mut params, x, y) = setup(7);
        params.w2[[0, 0]] = f64::NAN;
        let spec = PreconditionerSpec::new(adahessian(-1.0, 0.9, 0.999), 0.01);
        let mut state = OptimState::new(0);
        assert!(step_adahessian(&mut params, &x, &y, &spec, &mut state).is_err());
    }

    #[test]
    fn adam_zero_gradient_stays() {
        let (mut params, x, _) = setup(8);
        let y = crate::model::predict(&params, &x).unwrap();
        let before = params.clone();
        let spec = PreconditionerSpec::new(UpdateRule::Adam { beta1: 0.9, beta2: 0.999 }, 0.01).with_weight_decay(0.0);
        let mut opt = Optimizer::new(spec, None, 0).unwrap();
        for _ in 0..3 {
            opt.step(&mut params, &x, &y).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr() {
        let spec = PreconditionerSpec::new(UpdateRule::Adam { beta1: 0.9, beta2: 0.999 }, 0.01).with_weight_decay(0.0);
        let mut state = OptimState::new(0);
        let mut params = MlpParams {
            w1: array![[0.0]],
            w2: array![[0.0]],
            b2: array![0.0],
        };
        let g = MlpParams {
            w1: array![[3.0]],
            w2: array![[-0.2]],
            b2: array![1e-3],
        };
        let mut last = params.clone();
        for _ in 0..200 {
            last = params.clone();
            adam_update(&mut params, &g, 0.9, 0.999, &spec, &mut state);
        }
        let delta = params.zip_map(&last, |a, b| a - b);
        assert!((delta.w1[[0, 0]] + 0.01).abs() < 1e-6);
        assert!((delta.w2[[0, 0]] - 0.01).abs() < 1e-6);
        assert!((delta.b2[0] + 0.01).abs() < 1e-4);
    }

    #[test]
    fn adam_scalar_trace() {
        // gradients 1.0, -2.0, 0.5 with β = (0.9, 0.999), η = 0.1, ε = 1e-8
        let spec = PreconditionerSpec {
            rule: UpdateRule::Adam { beta1: 0.9, beta2: 0.999 },
            lr: 0.1,
            weight_decay: 0.0,
            eps: 1e-8,
        };
        let mut state = OptimState::new(0);
        let mut params = MlpParams {
            w1: array![[0.0]],
            w2: array![[0.0]],
            b2: array![0.0],
        };
        // hand-computed:
        // t=1: m=0.1, v=0.001, m̂=1, v̂=1 → Δ=-0.1/(1+ε)
        // t=2: m=0.09-0.2=-0.11, v=0.000999+0.004=0.004999, m̂=-0.11/0.19, v̂=0.004999/0.001999
        // t=3: m=-0.099+0.05=-0.049, v=0.004994001+0.00025=0.005244001, m̂=-0.049/0.271, v̂=0.005244001/0.002997001
        let m2: f64 = -0.11 / 0.19;
        let v2: f64 = 0.004999 / (1.0 - 0.999f64.powi(2));
        let m3: f64 = -0.049 / (1.0 - 0.9f64.powi(3));
        let v3: f64 = 0.005244001 / (1.0 - 0.999f64.powi(3));
        let expected = -0.1 / (1.0 + 1e-8) - 0.1 * m2 / (v2.sqrt() + 1e-8) - 0.1 * m3 / (v3.sqrt() + 1e-8);
        for g in [1.0, -2.0, 0.5] {
            let grad = MlpParams {
                w1: array![[g]],
                w2: array![[0.0]],
                b2: array![0.0],
            };
            adam_update(&mut params, &grad, 0.9, 0.999, &spec, &mut state);
        }
        assert!((params.w1[[0, 0]] - expected).abs() < 1e-12, "{} vs {expected}", params.w1[[0, 0]]);
    }

    #[test]
    fn sam_zero_radius_is_gd() {
        let (params, x, y) = setup(9);
        let mut a = params.clone();
        let mut b = params.clone();
        let mut sam = Optimizer::new(PreconditionerSpec::new(UpdateRule::SamGd { rho: 0.0 }, 0.05), None, 0).unwrap();
        let mut gd = Optimizer::new(PreconditionerSpec::new(UpdateRule::Gd, 0.05), None, 0).unwrap();
        for _ in 0..3 {
            sam.step(&mut a, &x, &y).unwrap();
            gd.step(&mut b, &x, &y).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn sam_zero_gradient_falls_back() {
        let (mut params, x, _) = setup(10);
        let y = crate::model::predict(&params, &x).unwrap();
        let before = params.clone();
        let spec = PreconditionerSpec::new(UpdateRule::SamGd { rho: 0.05 }, 0.1).with_weight_decay(0.0);
        step_sam(&mut params, &x, &y, &spec, &mut OptimState::new(0)).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn sam_step_uses_perturbed_gradient() {
        // readout-only quadratic: b2 is the only parameter with gradient when W1 = 0
        let params = MlpParams {
            w1: array![[0.0]],
            w2: array![[0.0]],
            b2: array![1.0],
        };
        let x = array![[1.0, 2.0]];
        let y = array![[3.0, 5.0]];
        // L(b) = ((b-3)² + (b-5)²)/2, ∇ = 2b − 8 = −6 at b = 1
        // ascent: b' = 1 + ρ·(−6)/6 = 1 − ρ; ∇(b') = 2(1 − ρ) − 8
        let rho = 0.25;
        let lr = 0.1;
        let spec = PreconditionerSpec::new(UpdateRule::SamGd { rho }, lr).with_weight_decay(0.0);
        let mut stepped = params.clone();
        step_sam(&mut stepped, &x, &y, &spec, &mut OptimState::new(0)).unwrap();
        let expected = 1.0 - lr * (2.0 * (1.0 - rho) - 8.0);
        assert!((stepped.b2[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn stepper_kind_mismatch() {
        let (mut params, x, y) = setup(11);
        let spec = PreconditionerSpec::new(UpdateRule::Gd, 0.1);
        assert!(step_sam(&mut params, &x, &y, &spec, &mut OptimState::new(0)).is_err());
        assert!(step_adam(&mut params, &x, &y, &spec, &mut OptimState::new(0)).is_err());
    }

    #[test]
    fn invalid_specs() {
        assert!(PreconditionerSpec::new(UpdateRule::Gd, 0.0).validate().is_err());
        assert!(PreconditionerSpec::new(adahessian(-1.0, 1.0, 0.5), 0.1).validate().is_err());
        assert!(PreconditionerSpec::new(UpdateRule::SamGd { rho: -1.0 }, 0.1).validate().is_err());
    }

    #[test]
    fn ridge_identity_features_interpolate() {
        let h = Array2::<f64>::eye(4);
        let y = array![[1.0, -2.0, 0.5, 3.0]];
        let fit = ridge_closed_form(&h, &y, 0.0).unwrap();
        assert!(fit.pseudo_inverse);
        let pred = fit.w2.t().dot(&h) + &fit.b2.view().insert_axis(Axis(1));
        assert!((&pred - &y).mapv(f64::abs).sum() < 1e-10);
    }

    #[test]
    fn ridge_heavy_regularization_shrinks() {
        let h = gaussian(5, 20, 40);
        let y = gaussian(2, 20, 41) + 3.0;
        let fit = ridge_closed_form(&h, &y, 1e12).unwrap();
        assert!(fit.w2.mapv(f64::abs).sum() < 1e-9);
        let mean = y.mean_axis(Axis(1)).unwrap();
        assert!((&fit.b2 - &mean).mapv(f64::abs).sum() < 1e-8);
    }

    #[test]
    fn ridge_is_a_minimizer() {
        let h = gaussian(6, 30, 50);
        let y = gaussian(2, 30, 51);
        let lambda = 0.7;
        let fit = ridge_closed_form(&h, &y, lambda).unwrap();
        assert!(!fit.pseudo_inverse);
        let best = ridge_objective(&h, &y, &fit.w2, &fit.b2, lambda);

        // stationarity of the objective
        let pred = fit.w2.t().dot(&h) + &fit.b2.view().insert_axis(Axis(1));
        let resid = &pred - &y;
        let grad_w = h.dot(&resid.t()) * 2.0 + &fit.w2 * (2.0 * lambda);
        let grad_b = resid.sum_axis(Axis(1)) * 2.0;
        assert!(grad_w.iter().chain(grad_b.iter()).all(|g| g.abs() < 1e-8));

        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for _ in 0..10_000 {
            let scale = 10f64.powf(rng.random_range(-4.0..0.0));
            let dw = Array2::from_shape_simple_fn(fit.w2.dim(), || scale * rng.sample::<f64, _>(StandardNormal));
            let db = Array1::from_shape_simple_fn(fit.b2.len(), || scale * rng.sample::<f64, _>(StandardNormal));
            let value = ridge_objective(&h, &y, &(&fit.w2 + &dw), &(&fit.b2 + &db), lambda);
            assert!(value >= best - 1e-9);
        }
    }

    #[test]
    fn ridge_rejects_bad_input() {
        assert!(ridge_closed_form(&Array2::zeros((3, 4)), &Array2::zeros((1, 5)), 1.0).is_err());
        assert!(ridge_closed_form(&Array2::zeros((3, 4)), &Array2::zeros((1, 4)), -1.0).is_err());
    }
}
