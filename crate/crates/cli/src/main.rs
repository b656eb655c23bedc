use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use mi_core::config::{load_config, RunConfig, RunMode};
use mi_core::harness::{self, RunSummary};
use mi_core::Error;

/// Model-imitation experiments and tabular certification.
///
/// Runs without an explicit `output_dir` are written to `$MI_OUTPUT_ROOT/<name>`
/// (default `runs/<name>`).
#[derive(Parser)]
#[command(name = "mi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and aggregate the learning curves.
    Run { config: PathBuf },
    /// Run the tabular certification suite described by a config.
    Verify { config: PathBuf },
    /// Re-execute a finished run from its snapshot and compare outputs.
    Replay { run_dir: PathBuf },
    /// Aggregate the per-seed curves of a run into one CSV.
    Curves {
        run_dir: PathBuf,
        #[arg(short, long, default_value = "curves.csv")]
        output: PathBuf,
    },
}

const EXIT_RUN_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn config_or_exit(path: &Path) -> Result<RunConfig, ExitCode> {
    load_config(path).map_err(|e| {
        eprintln!("config error: {e}");
        ExitCode::from(EXIT_CONFIG)
    })
}

fn report(summary: &RunSummary) -> ExitCode {
    if let Some(v) = &summary.verify {
        print!("{}", v.table());
    }
    for p in &summary.curve {
        println!("{:>8} {:>12.3} {:>10.3}", p.real_steps, p.eval_return_mean, p.eval_return_std);
    }
    for (seed, reason) in &summary.failures {
        eprintln!("seed {seed} failed: {reason}");
    }
    println!("artifacts in {}", summary.run_dir.display());
    if summary.ok() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_RUN_FAILURE)
    }
}

fn execute(config: &RunConfig) -> ExitCode {
    match harness::run(config) {
        Ok(summary) => report(&summary),
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("run failed: {e}");
            ExitCode::from(EXIT_RUN_FAILURE)
        }
    }
}

fn curves(run_dir: &Path, output: &Path) -> anyhow::Result<()> {
    let curve = harness::curves_from_run_dir(run_dir)?;
    std::fs::write(output, harness::curve_to_csv(&curve)).with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config } => match config_or_exit(&config) {
            Ok(cfg) => execute(&cfg),
            Err(code) => code,
        },
        Command::Verify { config } => match config_or_exit(&config) {
            Ok(mut cfg) => {
                cfg.mode = RunMode::Verify;
                execute(&cfg)
            }
            Err(code) => code,
        },
        Command::Replay { run_dir } => match harness::replay(&run_dir) {
            Ok(r) if r.mismatches.is_empty() => {
                println!("replay matches: {} files compared", r.compared);
                ExitCode::SUCCESS
            }
            Ok(r) => {
                for f in &r.mismatches {
                    eprintln!("differs: {}", f.display());
                }
                ExitCode::from(EXIT_RUN_FAILURE)
            }
            Err(e @ Error::Config(_)) => {
                eprintln!("config error: {e}");
                ExitCode::from(EXIT_CONFIG)
            }
            Err(e) => {
                eprintln!("replay failed: {e}");
                ExitCode::from(EXIT_RUN_FAILURE)
            }
        },
        Command::Curves { run_dir, output } => match curves(&run_dir, &output) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("{e:#}");
                ExitCode::from(EXIT_RUN_FAILURE)
            }
        },
    }
}
