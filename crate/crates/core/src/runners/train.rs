//! Full-batch training loop with trajectory logging and divergence detection.

use ndarray::Array2;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::model::{loss, MlpParams};
use crate::optim::Optimizer;

/// A run is aborted once the training loss exceeds this or turns non-finite.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajRow {
    pub step: usize,
    pub train_mse: f64,
    pub test_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub trajectory: Vec<TrajRow>,
    /// Step at which divergence was detected.
    pub diverged_at: Option<usize>,
    pub final_train_mse: f64,
    pub final_test_mse: f64,
}

impl TrainOutcome {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

pub struct EvalSet<'a> {
    pub x: &'a Array2<f64>,
    pub y: &'a Array2<f64>,
}

fn is_divergent(l: f64) -> bool {
    !l.is_finite() || l > DIVERGENCE_LOSS
}

/// Run `steps` updates, logging train/test MSE at step 0, every `log_every`
/// steps and at the final step.
pub fn train(
    mut params: MlpParams,
    optimizer: &mut Optimizer,
    x: &Array2<f64>,
    y: &Array2<f64>,
    eval: Option<EvalSet<'_>>,
    steps: usize,
    log_every: usize,
) -> Result<TrainOutcome> {
    let test_mse = |p: &MlpParams| -> Result<f64> {
        match &eval {
            Some(e) => loss(p, e.x, e.y),
            None => Ok(f64::NAN),
        }
    };
    let log_every = log_every.max(1);
    let mut trajectory = Vec::new();
    let mut diverged_at = None;
    for step in 0..steps {
        let before = params.clone();
        let info = optimizer.step(&mut params, x, y)?;
        if is_divergent(info.loss) {
            diverged_at = Some(step);
            params = before;
            break;
        }
        if step % log_every == 0 {
            trajectory.push(TrajRow {
                step,
                train_mse: info.loss,
                test_mse: test_mse(&before)?,
            });
        }
        if !params.is_finite() {
            diverged_at = Some(step + 1);
            params = before;
            break;
        }
    }
    let final_train_mse = loss(&params, x, y)?;
    let final_test_mse = test_mse(&params)?;
    let final_step = diverged_at.unwrap_or(steps);
    if is_divergent(final_train_mse) && diverged_at.is_none() {
        diverged_at = Some(steps);
    }
    if trajectory.last().map_or(true, |r| r.step < final_step) {
        trajectory.push(TrajRow {
            step: final_step,
            train_mse: final_train_mse,
            test_mse: final_test_mse,
        });
    }
    Ok(TrainOutcome {
        params,
        trajectory,
        diverged_at,
        final_train_mse,
        final_test_mse,
    })
}

/// Stable 64-bit seed from a run key; unrelated keys give unrelated streams.
pub fn derive_seed(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for part in parts {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
