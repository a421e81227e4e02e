//! Experiment orchestration: config, sweeps and CSV output.

pub mod config;
pub mod output;
pub mod robustness;
pub mod synthetic;
pub mod train;
pub mod ood;
pub mod transfer;

use rayon::prelude::*;

use crate::error::{LabError, Result};

pub use config::{ExperimentConfig, ExperimentKind, OodMethod, PrecondKind};
pub use train::{derive_seed, train, EvalSet, TrainOutcome, TrajRow, DIVERGENCE_LOSS};

/// Map `f` over `items` on `jobs` worker threads (0 = all cores), keeping
/// input order in the output.
pub fn parallel_map<T, R, F>(jobs: usize, items: Vec<T>, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync + Send,
{
    if jobs == 1 {
        return items.into_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| LabError::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    pool.install(|| items.into_par_iter().map(&f).collect())
}

/// Run a robustness, transfer or OOD sweep and return its named CSV tables.
pub fn run_tables(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<(&'static str, output::Table)>> {
    Ok(match cfg.experiment {
        ExperimentKind::Robustness => {
            let r = robustness::run_robustness(cfg, jobs)?;
            vec![
                ("robustness_summary.csv", r.summary),
                ("robustness_runs.csv", r.runs_table),
                ("robustness_traj.csv", r.trajectories),
            ]
        }
        ExperimentKind::Transfer => {
            let r = transfer::run_transfer(cfg, jobs)?;
            vec![
                ("transfer_summary.csv", r.summary),
                ("transfer_runs.csv", r.runs_table),
                ("transfer_traj.csv", r.trajectories),
            ]
        }
        ExperimentKind::Ood => {
            let r = ood::run_ood(cfg, jobs)?;
            vec![
                ("ood_summary.csv", r.summary),
                ("ood_runs.csv", r.runs_table),
                ("ood_grid.csv", r.grid_table),
            ]
        }
        ExperimentKind::Verify => {
            return Err(LabError::InvalidArgument("the verify suite produces check reports, not sweep tables".into()))
        }
    })
}
