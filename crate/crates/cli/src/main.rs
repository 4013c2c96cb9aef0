use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ecrm::optim::fmt_f64;
use ecrm::verify::Level;
use ecrm_cli::commands::{constants_table, solve_exact, verify};
use ecrm_cli::config::{thread_count, ExperimentConfig};
use ecrm_cli::plot::plot;
use ecrm_cli::run::run_experiment;
use ecrm_cli::{CliError, Result};
use serde::Serialize;

/// Risk-averse policy gradient experiments.
///
/// Exit codes: 0 success, 1 failed check or run, 2 usage error.
/// `ECRM_OUTPUT_DIR` overrides the config's output directory and
/// `ECRM_THREADS` the worker count.
#[derive(Parser)]
#[command(name = "ecrm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (λ, κ, run) job of a config and write the artifacts.
    Run { config: PathBuf },
    /// Render line charts and policy heatmaps of an artifact directory.
    Plot {
        dir: PathBuf,
        /// Comma-separated state indices for the heatmaps.
        #[arg(long, value_delimiter = ',')]
        states: Option<Vec<usize>>,
        /// Draw a heatmap for every run instead of the first of each setting.
        #[arg(long)]
        all_runs: bool,
        /// Trailing moving-average window applied to the curves.
        #[arg(long, default_value_t = 1)]
        window: usize,
    },
    /// Run the property suite; the JSON report goes to stdout or `--report`.
    Verify {
        #[arg(long)]
        full: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print J*(ρ) and the nominal greedy optimal path for each swept λ.
    SolveExact { config: PathBuf },
    /// Print the smoothness, domination and iteration-bound constants.
    Constants { config: PathBuf },
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load(path: &Path) -> Result<(ExperimentConfig, PathBuf)> {
    ExperimentConfig::load(path)
}

fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run { config } => {
            let (cfg, base) = load(&config)?;
            let manifest = run_experiment(&cfg, &base, thread_count()?)?;
            for s in &manifest.settings {
                for r in &s.runs {
                    let value = r.final_j_rho.map(fmt_f64).unwrap_or_else(|| "-".into());
                    eprintln!(
                        "lambda {} kappa {} run {}: {} (J_rho {value})",
                        fmt_f64(s.lambda),
                        fmt_f64(s.kappa),
                        r.run,
                        r.status
                    );
                }
            }
            println!("{}", cfg.output_dir.display());
            if manifest.complete {
                Ok(0)
            } else {
                eprintln!("some runs failed; manifest marked incomplete");
                Ok(1)
            }
        }
        Command::Plot {
            dir,
            states,
            all_runs,
            window,
        } => {
            for path in plot(&dir, states.as_deref(), all_runs, window)? {
                println!("{}", path.display());
            }
            Ok(0)
        }
        Command::Verify { full, report } => {
            let level = if full { Level::Full } else { Level::Fast };
            let rep = verify(level, thread_count()?)?;
            for c in &rep.checks {
                eprintln!(
                    "{} {}::{} residual {:.3e} tol {:.1e} slack {:.3e} ({} instances)",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.module,
                    c.name,
                    c.residual,
                    c.tolerance,
                    c.slack,
                    c.instances
                );
            }
            let json = serde_json::to_string_pretty(&rep)?;
            match report {
                Some(path) => std::fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))?,
                None => println!("{json}"),
            }
            Ok(rep.exit_code() as u8)
        }
        Command::SolveExact { config } => {
            let (cfg, base) = load(&config)?;
            print_json(&solve_exact(&cfg, &base)?)?;
            Ok(0)
        }
        Command::Constants { config } => {
            let (cfg, base) = load(&config)?;
            print_json(&constants_table(&cfg, &base)?)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
