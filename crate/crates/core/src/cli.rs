//! Command-line entry point.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::error::{LabError, Result};
use crate::runners::config::{ExperimentConfig, ExperimentKind};
use crate::runners::output::{fmt_b, fmt_f, write_outputs, Table};
use crate::runners::run_tables;
use crate::verify::{run_suite, CheckReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "precond-lab", version, about = "Preconditioned two-layer MLP experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// JSON config; defaults are used for missing keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set synthetic.d_h=128`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Label-noise sweep on the synthetic High/Low cases.
    Robustness(RunArgs),
    /// Optimizer comparison under correlation shift on noisy digits.
    Ood(RunArgs),
    /// Train on one synthetic task, refit the readout on another.
    Transfer(RunArgs),
    /// Run the numerical identity checks.
    Verify(RunArgs),
    /// Print the default config (after `--config`/`--set`) as JSON.
    DumpConfig(RunArgs),
}

fn exit_code(err: &LabError) -> i32 {
    match err {
        LabError::Config(_) => EXIT_CONFIG,
        LabError::Data { .. } => EXIT_DATA,
        _ => EXIT_USAGE,
    }
}

fn resolve(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig> {
    let base = match &args.config {
        Some(path) => {
            let mut cfg = ExperimentConfig::load(path)?;
            cfg.experiment = kind;
            cfg
        }
        None => ExperimentConfig::for_experiment(kind),
    };
    let mut cfg = base.with_overrides(&args.overrides)?;
    cfg.experiment = kind;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn report_table(reports: &[CheckReport]) -> Table {
    let mut t = Table::new(&["check", "passed", "deviation", "tolerance", "instance"]);
    for r in reports {
        t.push(vec![
            r.name.clone(),
            fmt_b(r.passed),
            fmt_f(r.deviation),
            fmt_f(r.tolerance),
            r.instance.clone(),
        ]);
    }
    t
}

fn run(kind: ExperimentKind, args: &RunArgs) -> Result<i32> {
    let cfg = resolve(kind, args)?;
    let dir = cfg.output_dir.clone();
    let start = Instant::now();
    let mut code = EXIT_OK;
    let written = match kind {
        ExperimentKind::Robustness | ExperimentKind::Transfer | ExperimentKind::Ood => {
            let tables = run_tables(&cfg, args.jobs)?;
            let named: Vec<(&str, &Table)> = tables.iter().map(|(n, t)| (*n, t)).collect();
            write_outputs(&dir, kind.name(), &cfg, &cfg.seeds, &named)?
        }
        ExperimentKind::Verify => {
            let reports = run_suite(&cfg.verify)?;
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            println!("{} checks, {} failed", reports.len(), failed);
            if failed > 0 {
                code = EXIT_CHECK_FAILED;
            }
            write_outputs(
                &dir,
                kind.name(),
                &cfg,
                &[cfg.verify.seed],
                &[("verify_report.csv", &report_table(&reports))],
            )?
        }
    };
    eprintln!("{} finished in {:.1}s", kind.name(), start.elapsed().as_secs_f64());
    for path in written {
        eprintln!("wrote {}", path.display());
    }
    Ok(code)
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Robustness(a) => run(ExperimentKind::Robustness, a),
        Command::Ood(a) => run(ExperimentKind::Ood, a),
        Command::Transfer(a) => run(ExperimentKind::Transfer, a),
        Command::Verify(a) => run(ExperimentKind::Verify, a),
        Command::DumpConfig(a) => dump_config(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dump_config(args: &RunArgs) -> Result<i32> {
    let base = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&args.overrides)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", cfg.to_pretty_json())?;
    Ok(EXIT_OK)
}
