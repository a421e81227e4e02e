//! Model/optimizer construction shared by the synthetic sweeps.

use ndarray::Array2;

use super::config::{AdahessianConfig, ExperimentConfig, InitNormalization, PrecondKind};
use super::train::{train, EvalSet, TrainOutcome};
use crate::data::Dataset;
use crate::error::Result;
use crate::model::{init_p_isotropic, init_readout, MlpParams};
use crate::optim::{Optimizer, PreconditionerSpec, UpdateRule};
use crate::spectra::{covariance, matrix_power, Preconditioner};

/// Mean of `xᵢᵀ P xᵢ` over the columns of `x`.
pub fn mean_quadratic_form(x: &Array2<f64>, p: &Preconditioner) -> f64 {
    (&p.apply(x) * x).sum() / x.ncols().max(1) as f64
}

pub fn adahessian_rule(p: f64, cfg: &AdahessianConfig) -> UpdateRule {
    UpdateRule::Adahessian {
        p,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        hutchinson_samples: cfg.hutchinson_samples,
    }
}

/// Initial parameters and optimizer for one synthetic run.
///
/// Covariance-power runs draw `W1` P-isotropically with `P = Σ^p` from the
/// training inputs; AdaHessian runs use the isotropic (`P = I`) draw. Both
/// consume the same `init_seed` stream, so `p = 0` starts identically.
pub fn setup_run(
    kind: PrecondKind,
    p: f64,
    x_train: &Array2<f64>,
    d_y: usize,
    cfg: &ExperimentConfig,
    init_seed: u64,
    optim_seed: u64,
) -> Result<(MlpParams, Optimizer)> {
    let syn = &cfg.synthetic;
    let precond = match kind {
        PrecondKind::CovPower => matrix_power(&covariance(x_train, syn.covariance_scale), p, syn.floor)?,
        PrecondKind::Adahessian => Preconditioner::identity(x_train.nrows()),
    };
    let sigma = match syn.init.normalization {
        InitNormalization::None => syn.init.scale,
        InitNormalization::Preactivation => syn.init.scale / mean_quadratic_form(x_train, &precond).sqrt(),
    };
    let w1 = init_p_isotropic(&precond, sigma, syn.d_h, init_seed)?;
    let (w2, b2) = init_readout(syn.d_h, d_y, init_seed.wrapping_add(1));
    let params = MlpParams { w1, w2, b2 };
    let (rule, eps, step_precond) = match kind {
        PrecondKind::CovPower => (UpdateRule::CovPower { p }, crate::optim::DEFAULT_EPS, Some(precond)),
        PrecondKind::Adahessian => (adahessian_rule(p, &cfg.adahessian), cfg.adahessian.eps, None),
    };
    let spec = PreconditionerSpec {
        rule,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        eps,
    };
    Ok((params, Optimizer::new(spec, step_precond, optim_seed)?))
}

pub fn train_synthetic(
    kind: PrecondKind,
    p: f64,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &ExperimentConfig,
    init_seed: u64,
    optim_seed: u64,
) -> Result<TrainOutcome> {
    let (params, mut opt) = setup_run(kind, p, &train_set.x, train_set.y.nrows(), cfg, init_seed, optim_seed)?;
    train(
        params,
        &mut opt,
        &train_set.x,
        &train_set.y,
        Some(EvalSet {
            x: &test_set.x,
            y: &test_set.y,
        }),
        cfg.steps,
        cfg.log_every,
    )
}
