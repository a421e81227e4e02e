//! Label-noise robustness sweep over (case, preconditioner, p, SNR, seed).

use std::time::Instant;

use super::config::{ExperimentConfig, PrecondKind};
use super::output::{fmt_b, fmt_f, mean_std, Table};
use super::synthetic::train_synthetic;
use super::train::{derive_seed, TrainOutcome};
use super::parallel_map;
use crate::data::{make_spectrum, make_teacher, synth_generate, synth_generate_with_sigma, Case};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessKey {
    pub case: Case,
    pub precond: PrecondKind,
    pub p: f64,
    pub snr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RobustnessRun {
    pub key: RobustnessKey,
    pub outcome: TrainOutcome,
    pub sigma_noise: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct RobustnessReport {
    pub runs: Vec<RobustnessRun>,
    pub summary: Table,
    pub runs_table: Table,
    pub trajectories: Table,
}

impl RobustnessReport {
    /// Mean final test MSE over non-diverged seeds and the number that diverged.
    pub fn mean_test_mse(&self, case: Case, precond: PrecondKind, p: f64, snr: f64) -> (f64, usize) {
        let cell: Vec<&RobustnessRun> = self
            .runs
            .iter()
            .filter(|r| r.key.case == case && r.key.precond == precond && r.key.p == p && r.key.snr == snr)
            .collect();
        let ok: Vec<f64> = cell
            .iter()
            .filter(|r| !r.outcome.diverged())
            .map(|r| r.outcome.final_test_mse)
            .collect();
        (mean_std(&ok).0, cell.len() - ok.len())
    }
}

/// Stream seeds for one (case, SNR, seed) cell. Data and init are shared by
/// every preconditioner and `p` so the sweep compares paired runs.
fn cell_seeds(case: Case, snr: f64, seed: u64) -> (u64, u64, u64) {
    let base = ["robustness", case.name(), &fmt_f(snr), &seed.to_string()];
    let with = |tag: &str| {
        let mut parts = base.to_vec();
        parts.push(tag);
        derive_seed(&parts)
    };
    (with("train"), with("test"), with("init"))
}

fn optim_seed(key: &RobustnessKey) -> u64 {
    derive_seed(&[
        "robustness",
        key.case.name(),
        key.precond.name(),
        &fmt_f(key.p),
        &fmt_f(key.snr),
        &key.seed.to_string(),
        "optim",
    ])
}

pub fn run_key(key: RobustnessKey, cfg: &ExperimentConfig) -> Result<RobustnessRun> {
    let start = Instant::now();
    let syn = &cfg.synthetic;
    let spectrum = make_spectrum(key.case, syn.d_x, syn.lambda)?;
    let teacher = make_teacher(key.case, syn.d_x)?;
    let (train_seed, test_seed, init_seed) = cell_seeds(key.case, key.snr, key.seed);
    let (train_set, calibrated) = synth_generate(&spectrum, &teacher, syn.n_train, key.snr, train_seed, "train")?;
    let test_set = synth_generate_with_sigma(&spectrum, &calibrated, syn.n_test, test_seed, "test")?;
    let outcome = train_synthetic(key.precond, key.p, &train_set, &test_set, cfg, init_seed, optim_seed(&key))?;
    Ok(RobustnessRun {
        key,
        outcome,
        sigma_noise: calibrated.sigma_noise,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

pub fn keys(cfg: &ExperimentConfig) -> Vec<RobustnessKey> {
    let mut keys = Vec::new();
    for &case in &cfg.cases {
        for &precond in &cfg.preconditioners {
            for &p in &cfg.p_list {
                for &snr in &cfg.snr_list {
                    for &seed in &cfg.seeds {
                        keys.push(RobustnessKey {
                            case,
                            precond,
                            p,
                            snr,
                            seed,
                        });
                    }
                }
            }
        }
    }
    keys
}

fn key_cells(k: &RobustnessKey) -> Vec<String> {
    vec![
        k.case.name().into(),
        k.precond.name().into(),
        fmt_f(k.p),
        fmt_f(k.snr),
        k.seed.to_string(),
    ]
}

pub fn run_robustness(cfg: &ExperimentConfig, jobs: usize) -> Result<RobustnessReport> {
    let runs = parallel_map(jobs, keys(cfg), |key| run_key(key, cfg))?;

    let mut runs_table = Table::new(&[
        "case",
        "preconditioner",
        "p",
        "snr",
        "seed",
        "sigma_noise",
        "final_train_mse",
        "final_test_mse",
        "diverged",
        "diverged_at",
        "wall_time_s",
    ]);
    let mut trajectories = Table::new(&["case", "preconditioner", "p", "snr", "seed", "step", "train_mse", "test_mse"]);
    for run in &runs {
        let mut row = key_cells(&run.key);
        row.extend([
            fmt_f(run.sigma_noise),
            fmt_f(run.outcome.final_train_mse),
            fmt_f(run.outcome.final_test_mse),
            fmt_b(run.outcome.diverged()),
            run.outcome.diverged_at.map(|s| s.to_string()).unwrap_or_default(),
            format!("{:.3}", run.wall_time_s),
        ]);
        runs_table.push(row);
        for t in &run.outcome.trajectory {
            let mut row = key_cells(&run.key);
            row.extend([t.step.to_string(), fmt_f(t.train_mse), fmt_f(t.test_mse)]);
            trajectories.push(row);
        }
    }

    let mut summary = Table::new(&[
        "case",
        "preconditioner",
        "p",
        "snr",
        "n_seeds",
        "n_diverged",
        "mean_test_mse",
        "std_test_mse",
        "mean_train_mse",
        "std_train_mse",
    ]);
    for &case in &cfg.cases {
        for &precond in &cfg.preconditioners {
            for &p in &cfg.p_list {
                for &snr in &cfg.snr_list {
                    let cell: Vec<&RobustnessRun> = runs
                        .iter()
                        .filter(|r| r.key.case == case && r.key.precond == precond && r.key.p == p && r.key.snr == snr)
                        .collect();
                    let ok: Vec<&&RobustnessRun> = cell.iter().filter(|r| !r.outcome.diverged()).collect();
                    let (mt, st) = mean_std(&ok.iter().map(|r| r.outcome.final_test_mse).collect::<Vec<_>>());
                    let (mtr, str_) = mean_std(&ok.iter().map(|r| r.outcome.final_train_mse).collect::<Vec<_>>());
                    summary.push(vec![
                        case.name().into(),
                        precond.name().into(),
                        fmt_f(p),
                        fmt_f(snr),
                        cell.len().to_string(),
                        (cell.len() - ok.len()).to_string(),
                        fmt_f(mt),
                        fmt_f(st),
                        fmt_f(mtr),
                        fmt_f(str_),
                    ]);
                }
            }
        }
    }
    Ok(RobustnessReport {
        runs,
        summary,
        runs_table,
        trajectories,
    })
}
