use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Args;
use rayon::prelude::*;
use relaxqp::policy::PolicyCheckpoint;
use relaxqp::suite::Manifest;
use relaxqp::{solve, FixedRelaxation, RelaxationPolicy, SolveReport, SolverConfig};

use crate::common::{emit, fmt_float, manifest_base, thread_pool, EXIT_BENCH_FAILURES};
use crate::{OnOff, SolverArgs};

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Instance manifest JSON.
    #[arg(long)]
    manifest: PathBuf,

    #[command(flatten)]
    solver: SolverArgs,

    /// Policy checkpoints to run next to the fixed baseline; repeatable.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,

    /// Output directory for results.csv and summary.csv; results go to
    /// standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

const HEADER: [&str; 9] = [
    "family",
    "size",
    "seed",
    "policy",
    "rho_mode",
    "iterations",
    "runtime_s",
    "rho_updates",
    "status",
];

struct Column {
    label: String,
    policy: Arc<dyn RelaxationPolicy>,
}

struct Row {
    family: String,
    size: usize,
    seed: u64,
    policy: String,
    rho_mode: &'static str,
    outcome: std::result::Result<SolveReport, String>,
}

fn columns(args: &BenchArgs, cfg: &SolverConfig) -> Result<Vec<Column>> {
    let mut cols = vec![Column {
        label: "baseline".into(),
        policy: Arc::new(FixedRelaxation(cfg.alpha0)),
    }];
    let mut seen = BTreeMap::new();
    for path in &args.checkpoint {
        let ckpt = PolicyCheckpoint::load(path)
            .with_context(|| format!("reading checkpoint {}", path.display()))?;
        let base = ckpt.variant.name().to_string();
        let count = seen.entry(base.clone()).or_insert(0usize);
        *count += 1;
        let label = if *count == 1 {
            base
        } else {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("checkpoint");
            format!("{base}:{stem}")
        };
        cols.push(Column {
            label,
            policy: Arc::new(ckpt),
        });
    }
    Ok(cols)
}

pub fn run(args: BenchArgs) -> Result<ExitCode> {
    let cfg = args.solver.config()?;
    let manifest = Manifest::load(&args.manifest)
        .with_context(|| format!("reading manifest {}", args.manifest.display()))?;
    let base = manifest_base(&args.manifest);
    let cols = columns(&args, &cfg)?;
    let modes: Vec<(bool, &'static str)> = match args.solver.adaptive_rho {
        Some(OnOff::On) => vec![(true, "adaptive")],
        Some(OnOff::Off) => vec![(false, "fixed")],
        None => vec![(false, "fixed"), (true, "adaptive")],
    };
    let pool = thread_pool(args.jobs)?;

    let rows: Vec<Row> = pool.install(|| {
        let problems: Vec<_> = manifest
            .instances
            .par_iter()
            .map(|e| e.problem(&base).map_err(|err| err.to_string()))
            .collect();
        let (nc, nm) = (cols.len(), modes.len());
        let tasks: Vec<(usize, usize, usize)> = (0..manifest.instances.len())
            .flat_map(|i| (0..nc).flat_map(move |c| (0..nm).map(move |m| (i, c, m))))
            .collect();
        tasks
            .par_iter()
            .map(|&(i, c, m)| {
                let spec = manifest.instances[i].spec;
                let (adaptive, mode) = modes[m];
                let run_cfg = SolverConfig {
                    adaptive_rho: adaptive,
                    ..cfg.clone()
                };
                let outcome = match &problems[i] {
                    Ok(prob) => {
                        solve(prob, &run_cfg, cols[c].policy.as_ref()).map_err(|e| e.to_string())
                    }
                    Err(e) => Err(e.clone()),
                };
                Row {
                    family: spec.family.name().into(),
                    size: spec.size,
                    seed: spec.seed,
                    policy: cols[c].label.clone(),
                    rho_mode: mode,
                    outcome,
                }
            })
            .collect()
    });

    let mut failed = 0usize;
    let mut results = csv::Writer::from_writer(Vec::new());
    results.write_record(HEADER)?;
    for r in &rows {
        let (iters, runtime, rho_updates, status) = match &r.outcome {
            Ok(rep) => (
                rep.iterations.to_string(),
                fmt_float(rep.runtime_seconds),
                rep.rho_updates.to_string(),
                rep.status.to_string(),
            ),
            Err(e) => {
                failed += 1;
                log::error!(
                    "{} size {} seed {} ({}): {e}",
                    r.family,
                    r.size,
                    r.seed,
                    r.policy
                );
                (String::new(), String::new(), String::new(), "failed".into())
            }
        };
        results.write_record([
            r.family.clone(),
            r.size.to_string(),
            r.seed.to_string(),
            r.policy.clone(),
            r.rho_mode.to_string(),
            iters,
            runtime,
            rho_updates,
            status,
        ])?;
    }
    let results = String::from_utf8(results.into_inner()?)?;
    emit(args.out.as_ref(), "results.csv", &results)?;

    let summary = summarize(&rows)?;
    match &args.out {
        Some(_) => emit(args.out.as_ref(), "summary.csv", &summary)?,
        None => eprint!("{summary}"),
    }

    if failed > 0 {
        log::error!("{failed} benchmark runs failed");
        return Ok(ExitCode::from(EXIT_BENCH_FAILURES));
    }
    Ok(ExitCode::SUCCESS)
}

/// Per-family means over successful runs, one row per (family, policy, mode).
fn summarize(rows: &[Row]) -> Result<String> {
    #[derive(Default)]
    struct Acc {
        runs: usize,
        failed: usize,
        iters: f64,
        runtime: f64,
    }
    let mut groups: BTreeMap<(String, String, &str), Acc> = BTreeMap::new();
    for r in rows {
        let acc = groups
            .entry((r.family.clone(), r.policy.clone(), r.rho_mode))
            .or_default();
        match &r.outcome {
            Ok(rep) => {
                acc.runs += 1;
                acc.iters += rep.iterations as f64;
                acc.runtime += rep.runtime_seconds;
            }
            Err(_) => acc.failed += 1,
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "family",
        "policy",
        "rho_mode",
        "instances",
        "failed",
        "mean_iterations",
        "mean_runtime_s",
    ])?;
    for ((family, policy, mode), acc) in &groups {
        let k = acc.runs.max(1) as f64;
        w.write_record([
            family.clone(),
            policy.clone(),
            mode.to_string(),
            acc.runs.to_string(),
            acc.failed.to_string(),
            format!("{:.2}", acc.iters / k),
            format!("{:.3e}", acc.runtime / k),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}
