use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use relaxqp::suite::Manifest;
use relaxqp::verifier::{verify_instance, DriftSchedule};
use relaxqp::Error;
use serde_json::json;

use crate::common::{
    emit, load_policy, manifest_base, thread_pool, EXIT_ERROR, EXIT_THEORY_VIOLATION,
};
use crate::{PolicyKind, SolverArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DriftKind {
    /// Skip the drift experiment.
    None,
    /// Parameters held fixed.
    Zero,
    /// theta_k = c / (k+1)^2.
    InverseSquare,
    /// theta_k = c r^k.
    Geometric,
    /// theta_k = c; not summable.
    Constant,
}

impl DriftKind {
    fn schedule(self) -> Option<DriftSchedule> {
        match self {
            DriftKind::None => None,
            DriftKind::Zero => Some(DriftSchedule::constant_parameters()),
            DriftKind::InverseSquare => Some(DriftSchedule::inverse_square(0.5)),
            DriftKind::Geometric => Some(DriftSchedule::geometric(0.5, 0.99)),
            DriftKind::Constant => Some(DriftSchedule::constant(0.05)),
        }
    }
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Instance manifest JSON.
    #[arg(long)]
    manifest: PathBuf,

    #[command(flatten)]
    solver: SolverArgs,

    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,

    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Iterations recorded for the identity and descent checks.
    #[arg(long, default_value_t = 200)]
    iters: usize,

    /// Iterations of the drift experiment; 0 disables it.
    #[arg(long, default_value_t = 10_000)]
    drift_iters: usize,

    #[arg(long, value_enum, default_value = "inverse-square")]
    drift_schedule: DriftKind,

    /// Output directory for verify.json; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long)]
    jobs: Option<usize>,
}

pub fn run(args: VerifyArgs) -> Result<ExitCode> {
    let cfg = args.solver.config()?;
    let manifest = Manifest::load(&args.manifest)
        .with_context(|| format!("reading manifest {}", args.manifest.display()))?;
    let base = manifest_base(&args.manifest);
    let policy = load_policy(args.policy, args.checkpoint.as_deref(), &cfg)?;
    let schedule = if args.drift_iters == 0 {
        None
    } else {
        args.drift_schedule.schedule()
    };
    let pool = thread_pool(args.jobs)?;

    let results: Vec<(String, relaxqp::Result<_>)> = pool.install(|| {
        manifest
            .instances
            .par_iter()
            .map(|e| {
                let name = e.spec.instance_name();
                let out = e.problem(&base).and_then(|prob| {
                    let reference = e.reference(&base, &prob)?;
                    verify_instance(
                        &prob,
                        &reference,
                        &cfg,
                        policy.as_ref(),
                        args.iters,
                        schedule.as_ref().map(|s| (s, args.drift_iters)),
                    )
                });
                (name, out)
            })
            .collect()
    });

    let mut violations = 0usize;
    let mut errors = 0usize;
    let mut entries = Vec::with_capacity(results.len());
    for (name, r) in results {
        match r {
            Ok(summary) => {
                if summary.drift_converged == Some(false) {
                    log::warn!("{name}: drift run did not converge");
                }
                entries.push(serde_json::to_value(summary)?);
            }
            Err(e) => {
                if matches!(e, Error::TheoryViolation { .. }) {
                    violations += 1;
                } else {
                    errors += 1;
                }
                log::error!("{name}: {e}");
                entries.push(json!({ "instance": name, "error": e.to_string() }));
            }
        }
    }
    emit(
        args.out.as_ref(),
        "verify.json",
        &serde_json::to_string_pretty(&entries)?,
    )?;

    if violations > 0 {
        eprintln!("{violations} instance(s) violated an identity or descent bound");
        return Ok(ExitCode::from(EXIT_THEORY_VIOLATION));
    }
    if errors > 0 {
        return Ok(ExitCode::from(EXIT_ERROR));
    }
    Ok(ExitCode::SUCCESS)
}
