use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Args;
use relaxqp::{solve, QpProblem, SolveStatus};

use crate::common::{emit, load_policy, EXIT_MAX_ITER};
use crate::{PolicyKind, SolverArgs};

#[derive(Args, Debug)]
pub struct SolveArgs {
    /// Problem JSON file.
    #[arg(long)]
    problem: PathBuf,

    #[command(flatten)]
    solver: SolverArgs,

    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,

    /// Policy checkpoint JSON.
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Output directory for report.json and residuals.csv; the report goes
    /// to standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: SolveArgs) -> Result<ExitCode> {
    let cfg = args.solver.config()?;
    let prob = QpProblem::load(&args.problem)
        .with_context(|| format!("reading problem {}", args.problem.display()))?;
    let policy = load_policy(args.policy, args.checkpoint.as_deref(), &cfg)?;
    let report = solve(&prob, &cfg, policy.as_ref())?;
    log::info!(
        "{}: {} after {} iterations",
        report.problem,
        report.status,
        report.iterations
    );

    emit(
        args.out.as_ref(),
        "report.json",
        &serde_json::to_string_pretty(&report)?,
    )?;
    if let Some(dir) = &args.out {
        let mut csv = Vec::new();
        report.write_residual_csv(&mut csv)?;
        std::fs::write(dir.join("residuals.csv"), csv)?;
    }
    Ok(match report.status {
        SolveStatus::Solved => ExitCode::SUCCESS,
        SolveStatus::MaxIter => ExitCode::from(EXIT_MAX_ITER),
    })
}
