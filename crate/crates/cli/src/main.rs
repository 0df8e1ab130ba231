//! `debias`: run method × seed sweeps, compare runs, and export plot series.

// `!(x >= 0.0)` is used on purpose so NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use debias_core::methods::Method;

use config::{RunConfig, ValidationError};
use report::PlotKind;

#[derive(Parser)]
#[command(
    name = "debias",
    version,
    about = "Subgroup-robust training experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every (method, seed) cell of a config.
    Run {
        config: PathBuf,
        /// Only validate the config.
        #[arg(long)]
        check: bool,
    },
    /// Merge run records into one methods × metrics table.
    Compare {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit JSON series for plotting.
    PlotData {
        record: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

fn emit(text: &str, out: Option<PathBuf>) -> anyhow::Result<()> {
    match out {
        Some(path) => run::write_atomic(&path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, check } => {
            let plan = config::plan(RunConfig::load(&config)?, &config)?;
            if check {
                println!(
                    "ok: {} methods × {} seeds -> {}",
                    plan.methods.len(),
                    plan.config.seeds.len(),
                    plan.output_dir.display()
                );
                return Ok(ExitCode::SUCCESS);
            }
            let summary = run::run(&plan)?;
            println!(
                "computed {}, skipped {}, failed {} -> {}",
                summary.computed,
                summary.skipped,
                summary.failed,
                plan.output_dir.display()
            );
            Ok(if summary.failed > 0 {
                ExitCode::from(EXIT_PARTIAL)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Compare { records, out } => {
            emit(&report::compare(&records)?, out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::PlotData {
            record,
            kind,
            method,
            seed,
            out,
        } => {
            let method = match method {
                Some(m) => Some(
                    m.parse::<Method>()
                        .map_err(|e| ValidationError(format!("--method: {e}")))?,
                ),
                None => None,
            };
            let data = report::plot_data(&record, kind, method, seed)?;
            emit(&format!("{}\n", serde_json::to_string_pretty(&data)?), out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}
