use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod bench;
mod common;
mod generate;
mod solve;
mod train;
mod verify;

/// Relaxed-ADMM QP solver with learned relaxation policies.
#[derive(Parser, Debug)]
#[command(name = "relaxqp", version)]
struct Cli {
    /// Log level for diagnostics on standard error.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve one problem file.
    Solve(solve::SolveArgs),
    /// Run policies over a manifest and write per-instance results.
    Bench(bench::BenchArgs),
    /// Train a relaxation policy from a training manifest.
    Train(train::TrainArgs),
    /// Check the Douglas–Rachford identities, descent and drift convergence.
    Verify(verify::VerifyArgs),
    /// Generate instances, reference solutions and a manifest.
    Generate(generate::GenerateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    Fixed,
    Scalar,
    Vector,
}

/// Solver settings shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct SolverArgs {
    /// Solver configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    max_iter: Option<usize>,

    #[arg(long, value_enum)]
    adaptive_rho: Option<OnOff>,

    /// Flip the sign of the relaxation step (test hook).
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Solve(a) => solve::run(a),
        Command::Bench(a) => bench::run(a),
        Command::Train(a) => train::run(a),
        Command::Verify(a) => verify::run(a),
        Command::Generate(a) => generate::run(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(common::EXIT_ERROR)
        }
    }
}
