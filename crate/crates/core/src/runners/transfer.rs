//! Forward transfer: train on Task 1, freeze the first layer, refit the
//! readout on Task 2 by ridge regression.

use std::time::Instant;

use ndarray::Array2;

use super::config::{ExperimentConfig, PrecondKind};
use super::output::{fmt_b, fmt_f, mean_std, Table};
use super::parallel_map;
use super::synthetic::train_synthetic;
use super::train::{derive_seed, TrainOutcome};
use crate::data::{make_transfer_pair, synth_generate, synth_generate_with_sigma, Dataset, TransferDirection, TransferPair};
use crate::error::Result;
use crate::model::{forward, mse_loss, MlpParams};
use crate::optim::RidgePath;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferKey {
    pub direction: TransferDirection,
    pub precond: PrecondKind,
    pub p: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RidgeSelection {
    pub lambda: f64,
    pub val_mse: f64,
    pub test_mse: f64,
    pub train_mse: f64,
    /// Validation MSE for every grid value, in grid order.
    pub path: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct TransferRun {
    pub key: TransferKey,
    pub task1: TrainOutcome,
    pub task2: RidgeSelection,
    pub wall_time_s: f64,
}

/// The five datasets of one transfer cell.
pub struct TransferData {
    pub task1_train: Dataset,
    pub task1_test: Dataset,
    pub task2_train: Dataset,
    pub task2_val: Dataset,
    pub task2_test: Dataset,
}

pub fn make_transfer_data(pair: &TransferPair, cfg: &ExperimentConfig, tag: &[&str]) -> Result<TransferData> {
    let seed = |name: &str| {
        let mut parts = tag.to_vec();
        parts.push(name);
        derive_seed(&parts)
    };
    let syn = &cfg.synthetic;
    let snr = cfg.transfer.snr;
    let (task1_train, t1) = synth_generate(&pair.spectrum, &pair.task1, syn.n_train, snr, seed("task1_train"), "task1_train")?;
    let task1_test = synth_generate_with_sigma(&pair.spectrum, &t1, syn.n_test, seed("task1_test"), "task1_test")?;
    let (task2_train, t2) = synth_generate(&pair.spectrum, &pair.task2, syn.n_train, snr, seed("task2_train"), "task2_train")?;
    let task2_val = synth_generate_with_sigma(&pair.spectrum, &t2, cfg.transfer.n_val, seed("task2_val"), "task2_val")?;
    let task2_test = synth_generate_with_sigma(&pair.spectrum, &t2, syn.n_test, seed("task2_test"), "task2_test")?;
    Ok(TransferData {
        task1_train,
        task1_test,
        task2_train,
        task2_val,
        task2_test,
    })
}

fn hidden(params: &MlpParams, x: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(forward(params, x)?.h)
}

/// Fit the readout on frozen features for every grid value and keep the one
/// with the lowest validation MSE (earliest on ties).
pub fn refit_readout(params: &MlpParams, data: &TransferData, grid: &[f64]) -> Result<RidgeSelection> {
    let h_train = hidden(params, &data.task2_train.x)?;
    let h_val = hidden(params, &data.task2_val.x)?;
    let h_test = hidden(params, &data.task2_test.x)?;
    let ridge = RidgePath::new(&h_train, &data.task2_train.y)?;
    let predict = |fit: &crate::optim::RidgeFit, h: &Array2<f64>| {
        let mut out = fit.w2.t().dot(h);
        out += &fit.b2.view().insert_axis(ndarray::Axis(1));
        out
    };
    let mut best: Option<(f64, f64, crate::optim::RidgeFit)> = None;
    let mut path = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let fit = ridge.solve(lambda)?;
        let val = mse_loss(&predict(&fit, &h_val), &data.task2_val.y)?;
        path.push((lambda, val));
        if best.as_ref().map_or(true, |(_, b, _)| val < *b) {
            best = Some((lambda, val, fit));
        }
    }
    let (lambda, val_mse, fit) = best.expect("non-empty ridge grid");
    Ok(RidgeSelection {
        lambda,
        val_mse,
        test_mse: mse_loss(&predict(&fit, &h_test), &data.task2_test.y)?,
        train_mse: mse_loss(&predict(&fit, &h_train), &data.task2_train.y)?,
        path,
    })
}

/// Train on Task 1 then refit Task 2 for one (preconditioner, p) on prepared data.
pub fn run_transfer_cell(
    precond: PrecondKind,
    p: f64,
    data: &TransferData,
    cfg: &ExperimentConfig,
    init_seed: u64,
    optim_seed: u64,
) -> Result<(TrainOutcome, RidgeSelection)> {
    let task1 = train_synthetic(precond, p, &data.task1_train, &data.task1_test, cfg, init_seed, optim_seed)?;
    let task2 = refit_readout(&task1.params, data, &cfg.transfer.ridge_grid.values())?;
    Ok((task1, task2))
}

pub fn run_key(key: TransferKey, cfg: &ExperimentConfig) -> Result<TransferRun> {
    let start = Instant::now();
    let pair = make_transfer_pair(key.direction, cfg.synthetic.d_x, cfg.synthetic.lambda)?;
    let seed = key.seed.to_string();
    let snr = fmt_f(cfg.transfer.snr);
    let data = make_transfer_data(&pair, cfg, &["transfer", key.direction.name(), &snr, &seed])?;
    let init_seed = derive_seed(&["transfer", key.direction.name(), &snr, &seed, "init"]);
    let optim_seed = derive_seed(&[
        "transfer",
        key.direction.name(),
        key.precond.name(),
        &fmt_f(key.p),
        &snr,
        &seed,
        "optim",
    ]);
    let (task1, task2) = run_transfer_cell(key.precond, key.p, &data, cfg, init_seed, optim_seed)?;
    Ok(TransferRun {
        key,
        task1,
        task2,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct TransferReport {
    pub runs: Vec<TransferRun>,
    pub summary: Table,
    pub runs_table: Table,
    pub trajectories: Table,
}

impl TransferReport {
    /// Mean (Task 1 test MSE, Task 2 test MSE) over non-diverged seeds.
    pub fn means(&self, direction: TransferDirection, precond: PrecondKind, p: f64) -> (f64, f64) {
        let ok: Vec<&TransferRun> = self
            .runs
            .iter()
            .filter(|r| r.key.direction == direction && r.key.precond == precond && r.key.p == p && !r.task1.diverged())
            .collect();
        (
            mean_std(&ok.iter().map(|r| r.task1.final_test_mse).collect::<Vec<_>>()).0,
            mean_std(&ok.iter().map(|r| r.task2.test_mse).collect::<Vec<_>>()).0,
        )
    }
}

pub fn keys(cfg: &ExperimentConfig) -> Vec<TransferKey> {
    let mut keys = Vec::new();
    for &direction in &cfg.transfer.directions {
        for &precond in &cfg.preconditioners {
            for &p in &cfg.p_list {
                for &seed in &cfg.seeds {
                    keys.push(TransferKey {
                        direction,
                        precond,
                        p,
                        seed,
                    });
                }
            }
        }
    }
    keys
}

fn key_cells(k: &TransferKey) -> Vec<String> {
    vec![
        k.direction.name().into(),
        k.precond.name().into(),
        fmt_f(k.p),
        k.seed.to_string(),
    ]
}

pub fn run_transfer(cfg: &ExperimentConfig, jobs: usize) -> Result<TransferReport> {
    let runs = parallel_map(jobs, keys(cfg), |key| run_key(key, cfg))?;
    let mut runs_table = Table::new(&[
        "direction",
        "preconditioner",
        "p",
        "seed",
        "task1_train_mse",
        "task1_test_mse",
        "task2_ridge_lambda",
        "task2_train_mse",
        "task2_val_mse",
        "task2_test_mse",
        "diverged",
        "wall_time_s",
    ]);
    let mut trajectories = Table::new(&["direction", "preconditioner", "p", "seed", "step", "train_mse", "test_mse"]);
    for run in &runs {
        let mut row = key_cells(&run.key);
        row.extend([
            fmt_f(run.task1.final_train_mse),
            fmt_f(run.task1.final_test_mse),
            fmt_f(run.task2.lambda),
            fmt_f(run.task2.train_mse),
            fmt_f(run.task2.val_mse),
            fmt_f(run.task2.test_mse),
            fmt_b(run.task1.diverged()),
            format!("{:.3}", run.wall_time_s),
        ]);
        runs_table.push(row);
        for t in &run.task1.trajectory {
            let mut row = key_cells(&run.key);
            row.extend([t.step.to_string(), fmt_f(t.train_mse), fmt_f(t.test_mse)]);
            trajectories.push(row);
        }
    }
    let mut summary = Table::new(&[
        "direction",
        "preconditioner",
        "p",
        "n_seeds",
        "n_diverged",
        "mean_task1_test_mse",
        "std_task1_test_mse",
        "mean_task2_test_mse",
        "std_task2_test_mse",
    ]);
    for &direction in &cfg.transfer.directions {
        for &precond in &cfg.preconditioners {
            for &p in &cfg.p_list {
                let cell: Vec<&TransferRun> = runs
                    .iter()
                    .filter(|r| r.key.direction == direction && r.key.precond == precond && r.key.p == p)
                    .collect();
                let ok: Vec<&&TransferRun> = cell.iter().filter(|r| !r.task1.diverged()).collect();
                let (m1, s1) = mean_std(&ok.iter().map(|r| r.task1.final_test_mse).collect::<Vec<_>>());
                let (m2, s2) = mean_std(&ok.iter().map(|r| r.task2.test_mse).collect::<Vec<_>>());
                summary.push(vec![
                    direction.name().into(),
                    precond.name().into(),
                    fmt_f(p),
                    cell.len().to_string(),
                    (cell.len() - ok.len()).to_string(),
                    fmt_f(m1),
                    fmt_f(s1),
                    fmt_f(m2),
                    fmt_f(s2),
                ]);
            }
        }
    }
    Ok(TransferReport {
        runs,
        summary,
        runs_table,
        trajectories,
    })
}
