use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ncentre_cli::{exit, parse_config_with, run_export, run_gradient_check, run_solve, run_sweeps};

#[derive(Parser)]
#[command(name = "ncentre", version, about = "Variational gluing of periodic N-centre orbits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for reports and trajectories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed of the multi-start and of the random gradient configurations.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key=value` override of a solver setting (repeatable).
    #[arg(long = "tol-override", global = true, value_name = "KEY=VALUE")]
    tol_override: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    Solve,
    Sweeps,
    GradCheck,
    Export,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            return ExitCode::from(code as u8);
        }
    };
    let text = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("cannot read {}: {e}", path.display());
                return ExitCode::from(exit::USAGE as u8);
            }
        },
        None => String::new(),
    };
    let mut cfg = match parse_config_with(&text, &cli.tol_override) {
        Ok(c) => c,
        Err(errors) => {
            eprintln!("invalid configuration:\n{errors}");
            return ExitCode::from(exit::USAGE as u8);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.out.is_some() {
        cfg.out_dir = cli.out.clone();
    }
    let result = match cli.command {
        Command::Solve => run_solve(&cfg),
        Command::Sweeps => run_sweeps(&cfg),
        Command::GradCheck => run_gradient_check(&cfg),
        Command::Export => run_export(&cfg),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("cannot write output: {e}");
            ExitCode::from(exit::USAGE as u8)
        }
    }
}
