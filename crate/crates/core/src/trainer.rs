//! Stage losses, rollouts and SPSA training of relaxation policies.
//!
//! Training is gradient-free: each step perturbs every checkpoint parameter
//! by `±c_k`, evaluates the batch loss on both sides and moves along the
//! resulting finite-difference estimate. Rollouts in a batch run in parallel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{solve_observed, SolveObserver, SolveStatus, SolverConfig, SolverState, Step};
use crate::error::{Error, Result};
use crate::linalg::norm2_sq;
use crate::policy::{PolicyCheckpoint, Selection};
use crate::qp::QpProblem;
use crate::rng::Stream;
use crate::suite::{InstanceEntry, ReferenceSolution};

pub const LOSS_EPS: f64 = 1e-10;
/// Log-ratio used for every stage of a diverged rollout.
pub const DIVERGENCE_LOG_RATIO: f64 = 6.0;
pub const DEFAULT_HORIZON: usize = 500;

/// `ψ(r) = softplus(r + 0.5) − 0.5`.
pub fn shaping(r: f64) -> f64 {
    let t = r + 0.5;
    if t > 30.0 {
        r
    } else {
        t.exp().ln_1p() - 0.5
    }
}

/// Shaped log-contraction of the distance to `(x*, λ*)` over one stage.
pub fn stage_loss(
    x_k: &[f64],
    lambda_k: &[f64],
    x_next: &[f64],
    lambda_next: &[f64],
    x_star: &[f64],
    lambda_star: &[f64],
    eps: f64,
) -> f64 {
    let dist = |x: &[f64], l: &[f64]| {
        let dx: Vec<f64> = x.iter().zip(x_star).map(|(a, b)| a - b).collect();
        let dl: Vec<f64> = l.iter().zip(lambda_star).map(|(a, b)| a - b).collect();
        norm2_sq(&dx) + norm2_sq(&dl)
    };
    let ratio = (dist(x_next, lambda_next) + eps) / (dist(x_k, lambda_k) + eps);
    shaping((0.5 * ratio.ln()).min(DIVERGENCE_LOG_RATIO))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub instance: String,
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub rho_updates: usize,
    pub solved: bool,
    pub diverged: bool,
}

impl RolloutRecord {
    pub fn total_loss(&self) -> f64 {
        self.losses.iter().sum()
    }

    /// Average stage loss; zero for an empty rollout.
    pub fn mean_loss(&self) -> f64 {
        if self.losses.is_empty() {
            0.0
        } else {
            self.total_loss() / self.losses.len() as f64
        }
    }
}

/// Problem with its reference solution.
#[derive(Debug, Clone)]
pub struct TrainInstance {
    pub problem: QpProblem,
    pub reference: ReferenceSolution,
}

struct StageLosses<'a> {
    reference: &'a ReferenceSolution,
    stage: usize,
    eps: f64,
    anchor: (Vec<f64>, Vec<f64>),
    losses: Vec<f64>,
}

impl StageLosses<'_> {
    fn close_stage(&mut self, x: &[f64], y: &[f64]) {
        let (x0, y0) = &self.anchor;
        self.losses.push(stage_loss(
            x0,
            y0,
            x,
            y,
            &self.reference.x_star,
            &self.reference.lambda_star,
            self.eps,
        ));
        self.anchor = (x.to_vec(), y.to_vec());
    }
}

impl SolveObserver for StageLosses<'_> {
    fn on_start(&mut self, state: &SolverState) {
        self.anchor = (state.x().to_vec(), state.y().to_vec());
    }

    fn on_step(&mut self, step: &Step<'_>) {
        if step.state.iter.is_multiple_of(self.stage) {
            self.close_stage(step.state.x(), step.state.y());
        }
    }

    fn wants_steps(&self) -> bool {
        true
    }
}

/// Cold-started solve for at most `horizon` iterations with one loss per
/// stage; a final partial stage is closed at termination.
pub fn rollout(
    inst: &TrainInstance,
    policy: &PolicyCheckpoint,
    cfg: &SolverConfig,
    horizon: usize,
    eps: f64,
) -> Result<RolloutRecord> {
    let name = inst.problem.name.clone();
    if horizon == 0 {
        return Ok(RolloutRecord {
            instance: name,
            losses: Vec::new(),
            iterations: 0,
            rho_updates: 0,
            solved: false,
            diverged: false,
        });
    }
    let run_cfg = SolverConfig {
        max_iter: horizon,
        ..cfg.clone()
    };
    let mut obs = StageLosses {
        reference: &inst.reference,
        stage: cfg.stage_length,
        eps,
        anchor: (Vec::new(), Vec::new()),
        losses: Vec::new(),
    };
    match solve_observed(&inst.problem, &run_cfg, policy, &mut obs) {
        Ok(rep) => {
            if rep.iterations % cfg.stage_length != 0 {
                obs.close_stage(&rep.x, &rep.y);
            }
            Ok(RolloutRecord {
                instance: name,
                losses: obs.losses,
                iterations: rep.iterations,
                rho_updates: rep.rho_updates,
                solved: rep.status == SolveStatus::Solved,
                diverged: false,
            })
        }
        Err(Error::Divergence { iter }) => {
            let stages = horizon.div_ceil(cfg.stage_length);
            Ok(RolloutRecord {
                instance: name,
                losses: vec![shaping(DIVERGENCE_LOG_RATIO); stages],
                iterations: iter,
                rho_updates: 0,
                solved: false,
                diverged: true,
            })
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub horizon: usize,
    pub loss_eps: f64,
    /// SPSA step gain `a` in `a / (k + 1 + A)^0.602`.
    pub step_size: f64,
    /// Stability constant `A`.
    pub step_offset: f64,
    /// SPSA perturbation gain `c` in `c / (k + 1)^0.101`.
    pub perturbation: f64,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 16,
            horizon: DEFAULT_HORIZON,
            loss_eps: LOSS_EPS,
            step_size: 0.2,
            step_offset: 50.0,
            perturbation: 0.05,
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, train_len: usize) -> Result<()> {
        self.solver.validate()?;
        if self.batch_size == 0 || self.batch_size > train_len {
            return Err(Error::Input(format!(
                "batch size {} for {train_len} training instances",
                self.batch_size
            )));
        }
        if !(self.step_size > 0.0 && self.perturbation > 0.0 && self.step_offset >= 0.0) {
            return Err(Error::Input("SPSA gains must be positive".into()));
        }
        if !(self.loss_eps > 0.0) {
            return Err(Error::Input("loss_eps must be positive".into()));
        }
        Ok(())
    }

    fn gains(&self, k: usize) -> (f64, f64) {
        let a = self.step_size / (k as f64 + 1.0 + self.step_offset).powf(0.602);
        let c = self.perturbation / (k as f64 + 1.0).powf(0.101);
        (a, c)
    }
}

/// Inputs and settings of one training run, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub family: String,
    pub train_instances: Vec<InstanceEntry>,
    pub val_instances: Vec<InstanceEntry>,
    pub config: TrainConfig,
    pub seed: u64,
}

impl TrainingManifest {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub mean_val_iters: f64,
    pub mean_val_rho_updates: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub ckpt_iter: PolicyCheckpoint,
    pub ckpt_rho: PolicyCheckpoint,
    /// Scores of the initial checkpoint, reported as epoch 0.
    pub initial: EpochLog,
    /// One entry per training epoch.
    pub log: Vec<EpochLog>,
    /// False when no epoch beat the initial checkpoint on validation.
    pub improved: bool,
}

/// Mean of per-rollout mean stage losses.
pub fn batch_loss(
    batch: &[&TrainInstance],
    policy: &PolicyCheckpoint,
    cfg: &TrainConfig,
) -> Result<f64> {
    let records: Vec<RolloutRecord> = batch
        .par_iter()
        .map(|inst| rollout(inst, policy, &cfg.solver, cfg.horizon, cfg.loss_eps))
        .collect::<Result<_>>()?;
    Ok(records.iter().map(RolloutRecord::mean_loss).sum::<f64>() / records.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationScore {
    pub mean_iters: f64,
    pub mean_rho_updates: f64,
}

/// Full solves (no horizon) on the validation set.
pub fn validate(
    val: &[TrainInstance],
    policy: &PolicyCheckpoint,
    solver: &SolverConfig,
) -> Result<ValidationScore> {
    let reps: Vec<(usize, usize)> = val
        .par_iter()
        .map(|inst| {
            crate::engine::solve(&inst.problem, solver, policy)
                .map(|r| (r.iterations, r.rho_updates))
        })
        .collect::<Result<_>>()?;
    let k = reps.len().max(1) as f64;
    Ok(ValidationScore {
        mean_iters: reps.iter().map(|r| r.0 as f64).sum::<f64>() / k,
        mean_rho_updates: reps.iter().map(|r| r.1 as f64).sum::<f64>() / k,
    })
}

fn tagged(
    mut c: PolicyCheckpoint,
    epoch: usize,
    selection: Selection,
    family: &str,
) -> PolicyCheckpoint {
    c.metadata.epoch = Some(epoch);
    c.metadata.selection = Some(selection);
    c.metadata.family = Some(family.to_string());
    c.metadata.optimizer = Some("spsa".into());
    c
}

/// SPSA training with per-epoch validation and two selected checkpoints.
///
/// `ckpt_iter` has the lowest mean validation iterations, `ckpt_rho` the
/// fewest mean ρ updates (ties broken by iterations). Both start as `ckpt0`
/// and are only replaced by strictly better epochs.
pub fn train(
    train_set: &[TrainInstance],
    val_set: &[TrainInstance],
    ckpt0: &PolicyCheckpoint,
    cfg: &TrainConfig,
    family: &str,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate(train_set.len())?;
    ckpt0.validate()?;
    let mut theta = ckpt0.params();
    let mut current = ckpt0.clone();
    let mut rng = Stream::new("trainer", train_set.len(), cfg.seed, "spsa");

    let score0 = validate(val_set, ckpt0, &cfg.solver)?;
    let all: Vec<&TrainInstance> = train_set.iter().collect();
    let log0 = EpochLog {
        epoch: 0,
        mean_train_loss: batch_loss(&all, ckpt0, cfg)?,
        mean_val_iters: score0.mean_iters,
        mean_val_rho_updates: score0.mean_rho_updates,
    };
    on_epoch(&log0);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best_iter = (score0, tagged(ckpt0.clone(), 0, Selection::Iter, family));
    let mut best_rho = (score0, tagged(ckpt0.clone(), 0, Selection::Rho, family));
    let mut improved = false;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.index(i + 1));
        }
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainInstance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (a, c) = cfg.gains(step);
            let delta: Vec<f64> = (0..theta.len()).map(|_| rng.sign()).collect();
            let plus: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t + c * d).collect();
            let minus: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t - c * d).collect();
            current.set_params(&plus)?;
            let l_plus = batch_loss(&batch, &current, cfg)?;
            current.set_params(&minus)?;
            let l_minus = batch_loss(&batch, &current, cfg)?;
            let g = (l_plus - l_minus) / (2.0 * c);
            // Δ entries are ±1, so Δ⁻¹ = Δ.
            for (t, d) in theta.iter_mut().zip(&delta) {
                *t -= a * g * d;
            }
            losses.push(0.5 * (l_plus + l_minus));
            step += 1;
        }
        current.set_params(&theta)?;
        let score = validate(val_set, &current, &cfg.solver)?;
        let entry = EpochLog {
            epoch,
            mean_train_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            mean_val_iters: score.mean_iters,
            mean_val_rho_updates: score.mean_rho_updates,
        };
        on_epoch(&entry);
        log.push(entry);

        if score.mean_iters < best_iter.0.mean_iters {
            best_iter = (
                score,
                tagged(current.clone(), epoch, Selection::Iter, family),
            );
            improved = true;
        }
        let better_rho = score.mean_rho_updates < best_rho.0.mean_rho_updates
            || (score.mean_rho_updates == best_rho.0.mean_rho_updates
                && score.mean_iters < best_rho.0.mean_iters);
        if better_rho {
            best_rho = (
                score,
                tagged(current.clone(), epoch, Selection::Rho, family),
            );
        }
    }
    if !improved && cfg.epochs > 0 {
        log::warn!("validation never improved on the initial checkpoint");
    }
    Ok(TrainOutcome {
        ckpt_iter: best_iter.1,
        ckpt_rho: best_rho.1,
        initial: log0,
        log,
        improved,
    })
}
