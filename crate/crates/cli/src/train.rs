use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Args;
use rayon::prelude::*;
use relaxqp::policy::{fit_norm_from_rollouts, PolicyCheckpoint, Variant};
use relaxqp::suite::InstanceEntry;
use relaxqp::trainer::{train, TrainInstance, TrainingManifest};

use crate::common::{ensure_dir, fmt_float, manifest_base, thread_pool};
use crate::{PolicyKind, SolverArgs};

/// Iterations of the baseline rollouts that fit feature normalization.
const NORM_ROLLOUT_ITERS: usize = 500;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training manifest JSON.
    #[arg(long)]
    manifest: PathBuf,

    #[command(flatten)]
    solver: SolverArgs,

    #[arg(long, value_enum, default_value = "scalar")]
    policy: PolicyKind,

    /// Initial checkpoint; a fresh network is built when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    #[arg(long)]
    epochs: Option<usize>,

    /// Output directory for ckpt_iter.json, ckpt_rho.json and train_log.csv.
    #[arg(long)]
    out: PathBuf,

    #[arg(long)]
    jobs: Option<usize>,
}

fn load_instances(entries: &[InstanceEntry], base: &std::path::Path) -> Result<Vec<TrainInstance>> {
    let loaded: Vec<Option<TrainInstance>> = entries
        .par_iter()
        .map(|e| -> Result<Option<TrainInstance>> {
            let problem = e.problem(base)?;
            match e.reference(base, &problem) {
                Ok(reference) => Ok(Some(TrainInstance { problem, reference })),
                Err(err @ relaxqp::Error::ReferenceFailure { .. }) => {
                    log::warn!("excluding {}: {err}", e.spec.instance_name());
                    Ok(None)
                }
                Err(err) => Err(err.into()),
            }
        })
        .collect::<Result<_>>()?;
    Ok(loaded.into_iter().flatten().collect())
}

pub fn run(args: TrainArgs) -> Result<ExitCode> {
    let manifest = TrainingManifest::load(&args.manifest)
        .with_context(|| format!("reading training manifest {}", args.manifest.display()))?;
    let base = manifest_base(&args.manifest);
    let mut cfg = manifest.config.clone();
    cfg.solver = args.solver.resolve(cfg.solver)?;
    if let Some(seed) = args.solver.seed {
        cfg.seed = seed;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    let variant = match args.policy {
        PolicyKind::Scalar => Variant::Scalar,
        PolicyKind::Vector => Variant::Vector,
        PolicyKind::Fixed => bail!("the fixed policy has nothing to train"),
    };

    let pool = thread_pool(args.jobs)?;
    let (train_set, val_set) = pool.install(|| -> Result<_> {
        Ok((
            load_instances(&manifest.train_instances, &base)?,
            load_instances(&manifest.val_instances, &base)?,
        ))
    })?;
    if train_set.is_empty() {
        bail!("no usable training instances");
    }

    let ckpt0 = match &args.checkpoint {
        Some(p) => {
            let c = PolicyCheckpoint::load(p)
                .with_context(|| format!("reading checkpoint {}", p.display()))?;
            if c.variant != variant {
                bail!("{} holds a {} policy", p.display(), c.variant.name());
            }
            c
        }
        None => {
            let probs: Vec<_> = train_set.iter().map(|t| t.problem.clone()).collect();
            let source = format!(
                "{} baseline rollouts, {NORM_ROLLOUT_ITERS} iterations",
                manifest.family
            );
            let norm =
                fit_norm_from_rollouts(&probs, &cfg.solver, variant, NORM_ROLLOUT_ITERS, source)?;
            PolicyCheckpoint::init(variant, norm, manifest.seed)?
        }
    };

    let outcome = pool.install(|| {
        train(&train_set, &val_set, &ckpt0, &cfg, &manifest.family, |e| {
            log::info!(
                "epoch {}: loss {:.4}, val iterations {:.2}, val rho updates {:.2}",
                e.epoch,
                e.mean_train_loss,
                e.mean_val_iters,
                e.mean_val_rho_updates
            );
        })
    })?;
    if !outcome.improved && cfg.epochs > 0 {
        eprintln!("warning: validation never improved; returning the initial checkpoint");
    }

    ensure_dir(&args.out)?;
    outcome.ckpt_iter.save(&args.out.join("ckpt_iter.json"))?;
    outcome.ckpt_rho.save(&args.out.join("ckpt_rho.json"))?;
    let mut log = csv::Writer::from_path(args.out.join("train_log.csv"))?;
    log.write_record([
        "epoch",
        "mean_train_loss",
        "mean_val_iters",
        "mean_val_rho_updates",
    ])?;
    for e in &outcome.log {
        log.write_record([
            e.epoch.to_string(),
            fmt_float(e.mean_train_loss),
            fmt_float(e.mean_val_iters),
            fmt_float(e.mean_val_rho_updates),
        ])?;
    }
    log.flush()?;
    Ok(ExitCode::SUCCESS)
}
