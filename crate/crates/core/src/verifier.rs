//! Numerical checks of the Douglas–Rachford view of the relaxed iteration.
//!
//! The solver is read as ADMM on the consensus problem
//! `min f(x̃, z̃) + g(x, z)` s.t. `(x̃, z̃) = (x, z)`, so that `A = I`,
//! `B = −I`, `c = 0` and every vector here lives in `ℝⁿ⁺ᵐ` with the x-block
//! first. The x-block uses penalty `σ`, relaxation `alpha_x` and a multiplier
//! that stays at zero.

use serde::{Deserialize, Serialize};

use crate::engine::{
    splitting_residuals, DiagParams, Iterate, RelaxationPolicy, SolveObserver, SolverConfig,
    SolverState, Step,
};
use crate::error::{Error, Result};
use crate::linalg::inf_norm;
use crate::qp::QpProblem;
use crate::suite::ReferenceSolution;

/// Allowed identity error relative to `1 + ‖y‖∞`.
pub const IDENTITY_TOL: f64 = 1e-8;
/// Allowed negative descent slack relative to `1 + ‖y_k‖²_H`.
pub const DESCENT_TOL: f64 = 1e-8;

/// One recorded step: iterates before and after, and the parameters in force.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub prev: Iterate,
    pub next: Iterate,
    /// `R_k`, used by this step.
    pub rho: Vec<f64>,
    /// `R_{k+1}`, in force after any penalty update that followed the step.
    pub rho_next: Vec<f64>,
    pub gamma: Vec<f64>,
    pub alpha_x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub sigma: f64,
    pub steps: Vec<TraceStep>,
}

/// Observer that records every step of a solve.
#[derive(Default)]
pub struct TraceRecorder {
    sigma: f64,
    last: Option<Iterate>,
    steps: Vec<TraceStep>,
}

impl TraceRecorder {
    pub fn into_trace(self) -> Trace {
        Trace {
            sigma: self.sigma,
            steps: self.steps,
        }
    }
}

impl SolveObserver for TraceRecorder {
    fn on_start(&mut self, state: &SolverState) {
        self.sigma = state.sigma();
        self.last = Some(state.iterate.clone());
    }

    fn on_step(&mut self, step: &Step<'_>) {
        let next = step.state.iterate.clone();
        let prev = self
            .last
            .replace(next.clone())
            .expect("on_start runs first");
        self.steps.push(TraceStep {
            prev,
            next,
            rho: step.rho_used.to_vec(),
            rho_next: step.state.rho.values().to_vec(),
            gamma: step.gamma_used.to_vec(),
            alpha_x: step.alpha_x_used,
        });
    }

    fn wants_steps(&self) -> bool {
        true
    }
}

/// Runs `iters` steps (or until termination) and records them.
pub fn record_trace(
    prob: &QpProblem,
    cfg: &SolverConfig,
    policy: &dyn RelaxationPolicy,
    iters: usize,
) -> Result<Trace> {
    let cfg = SolverConfig {
        max_iter: iters,
        ..cfg.clone()
    };
    let mut rec = TraceRecorder::default();
    crate::engine::solve_observed(prob, &cfg, policy, &mut rec)?;
    Ok(rec.into_trace())
}

/// Dual DRS quantities at one point of the trajectory, all in `ℝⁿ⁺ᵐ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrsState {
    /// `λ + R σ` with the penalty in force after the step.
    pub y: Vec<f64>,
    /// `λ + R_prev σ` with the penalty used by the step.
    pub y_tilde: Vec<f64>,
    pub lambda: Vec<f64>,
    pub sigma: Vec<f64>,
}

fn stack(x: &[f64], z: &[f64]) -> Vec<f64> {
    x.iter().chain(z).copied().collect()
}

/// `λ = (0, y)`.
fn multiplier(it: &Iterate) -> Vec<f64> {
    stack(&vec![0.0; it.x.len()], &it.y)
}

/// Penalty over the consensus space, `(σ·1, R)`.
fn full_penalty(sigma: f64, n: usize, rho: &[f64]) -> Vec<f64> {
    stack(&vec![sigma; n], rho)
}

/// Relaxation over the consensus space, `(alpha_x·1, Γ)`.
fn full_relaxation(alpha_x: f64, n: usize, gamma: &[f64]) -> Vec<f64> {
    stack(&vec![alpha_x; n], gamma)
}

fn dual_point(lambda: &[f64], rho: &[f64], sigma: &[f64]) -> Vec<f64> {
    lambda
        .iter()
        .zip(rho)
        .zip(sigma)
        .map(|((l, r), s)| l + r * s)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    /// `states[0]` is the initial point; `states[k + 1]` follows step `k`.
    pub states: Vec<DrsState>,
    /// Per step, `‖(ỹ_{k+1} − y_k) − ΓR e_{k+1}‖∞ / (1 + ‖y_k‖∞)`.
    pub relax_violation: Vec<f64>,
    /// Per step, `‖(y_{k+1} − ỹ_{k+1}) − (R_{k+1} − R_k) σ_{k+1}‖∞ / (1 + ‖y_{k+1}‖∞)`.
    pub penalty_violation: Vec<f64>,
}

impl Reconstruction {
    pub fn max_relax(&self) -> f64 {
        self.relax_violation.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_penalty(&self) -> f64 {
        self.penalty_violation.iter().copied().fold(0.0, f64::max)
    }
}

/// Builds the DRS states of a trajectory and checks both state identities.
pub fn reconstruct_drs(trace: &Trace) -> Result<Reconstruction> {
    let Some(first) = trace.steps.first() else {
        return Ok(Reconstruction {
            states: Vec::new(),
            relax_violation: Vec::new(),
            penalty_violation: Vec::new(),
        });
    };
    let n = first.prev.x.len();
    let sigma = trace.sigma;

    let lambda0 = multiplier(&first.prev);
    let sigma0 = stack(&first.prev.x, &first.prev.z);
    let y0 = dual_point(&lambda0, &full_penalty(sigma, n, &first.rho), &sigma0);
    let mut states = vec![DrsState {
        y: y0.clone(),
        y_tilde: y0,
        lambda: lambda0,
        sigma: sigma0,
    }];
    let mut relax = Vec::with_capacity(trace.steps.len());
    let mut penalty = Vec::with_capacity(trace.steps.len());

    for (k, step) in trace.steps.iter().enumerate() {
        let r_k = full_penalty(sigma, n, &step.rho);
        let r_next = full_penalty(sigma, n, &step.rho_next);
        let gamma = full_relaxation(step.alpha_x, n, &step.gamma);
        let lambda = multiplier(&step.next);
        let sig = stack(&step.next.x, &step.next.z);
        let y_tilde = dual_point(&lambda, &r_k, &sig);
        let y = dual_point(&lambda, &r_next, &sig);

        let y_k = &states[k].y;
        let e = stack(&step.next.x_tilde, &step.next.z_tilde)
            .iter()
            .zip(&states[k].sigma)
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>();
        let v_relax = (0..y.len())
            .map(|i| ((y_tilde[i] - y_k[i]) - gamma[i] * r_k[i] * e[i]).abs())
            .fold(0.0, f64::max)
            / (1.0 + inf_norm(y_k));
        let v_penalty = (0..y.len())
            .map(|i| ((y[i] - y_tilde[i]) - (r_next[i] - r_k[i]) * sig[i]).abs())
            .fold(0.0, f64::max)
            / (1.0 + inf_norm(&y));

        for (what, v) in [
            ("y_tilde - y_k = Gamma R e", v_relax),
            ("y - y_tilde = E sigma", v_penalty),
        ] {
            if !(v <= IDENTITY_TOL) {
                return Err(Error::TheoryViolation {
                    step: k,
                    what: what.into(),
                    magnitude: v,
                    allowed: IDENTITY_TOL,
                });
            }
        }
        relax.push(v_relax);
        penalty.push(v_penalty);
        states.push(DrsState {
            y,
            y_tilde,
            lambda,
            sigma: sig,
        });
    }
    Ok(Reconstruction {
        states,
        relax_violation: relax,
        penalty_violation: penalty,
    })
}

/// `κ = 2/α_max − 1`.
pub fn kappa(alpha_max: f64) -> f64 {
    2.0 / alpha_max - 1.0
}

fn weighted_sq(v: &[f64], w: &[f64], h_inv: &[f64]) -> f64 {
    v.iter()
        .zip(w)
        .zip(h_inv)
        .map(|((a, b), h)| (a - b) * (a - b) / h)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    /// Index of the first checked step. Step 0 is skipped when the starting
    /// point is not a projection output (`z₀ ∉ [l, u]` or `y₀ ∉ N(z₀)`).
    pub first_step: usize,
    pub slacks: Vec<f64>,
    /// Slack divided by `1 + ‖y_k‖²_H`.
    pub relative: Vec<f64>,
}

impl DescentReport {
    pub fn min_relative(&self) -> f64 {
        self.relative.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `z ∈ [l, u]` and `y` in the normal cone of the box at `z`, so that
/// `(y, z)` is recoverable from `y + Rz` alone.
fn projection_consistent(prob: &QpProblem, it: &Iterate) -> bool {
    (0..prob.m()).all(|i| {
        let (z, y, lo, hi) = (it.z[i], it.y[i], prob.l[i], prob.u[i]);
        z >= lo && z <= hi && (y <= 0.0 || z == hi) && (y >= 0.0 || z == lo)
    })
}

/// Per-step slack of the descent inequality in the metric `H_k = (Γ_k R_k)⁻¹`
/// around `y* = λ* + R_k σ*`.
pub fn check_descent(
    trace: &Trace,
    recon: &Reconstruction,
    reference: &ReferenceSolution,
    prob: &QpProblem,
    alpha_max: f64,
) -> Result<DescentReport> {
    let n = prob.n();
    let kap = kappa(alpha_max);
    let lambda_star = stack(&vec![0.0; n], &reference.lambda_star);
    let sigma_star = stack(&reference.x_star, &reference.z_star(prob));
    let mut slacks = Vec::with_capacity(trace.steps.len());
    let mut relative = Vec::with_capacity(trace.steps.len());
    let first_step = match trace.steps.first() {
        Some(s) if !projection_consistent(prob, &s.prev) => 1,
        _ => 0,
    };

    for (k, step) in trace.steps.iter().enumerate().skip(first_step) {
        let r_k = full_penalty(trace.sigma, n, &step.rho);
        let h_inv: Vec<f64> = full_relaxation(step.alpha_x, n, &step.gamma)
            .iter()
            .zip(&r_k)
            .map(|(g, r)| g * r)
            .collect();
        let y_star = dual_point(&lambda_star, &r_k, &sigma_star);
        let y_k = &recon.states[k].y;
        let y_tilde = &recon.states[k + 1].y_tilde;
        let slack = weighted_sq(y_k, &y_star, &h_inv)
            - weighted_sq(y_tilde, &y_star, &h_inv)
            - kap * weighted_sq(y_tilde, y_k, &h_inv);
        let zero = vec![0.0; y_k.len()];
        let rel = slack / (1.0 + weighted_sq(y_k, &zero, &h_inv));
        if !(rel >= -DESCENT_TOL) {
            return Err(Error::TheoryViolation {
                step: k,
                what: "descent inequality".into(),
                magnitude: rel,
                allowed: -DESCENT_TOL,
            });
        }
        slacks.push(slack);
        relative.push(rel);
    }
    Ok(DescentReport {
        first_step,
        slacks,
        relative,
    })
}

/// Shape of one drift sequence `θ_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaSequence {
    Zero,
    /// `c / (k + 1)^p`
    PSeries {
        c: f64,
        p: f64,
    },
    /// `c · r^k`
    Geometric {
        c: f64,
        r: f64,
    },
    Constant {
        c: f64,
    },
}

impl ThetaSequence {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            ThetaSequence::Zero => 0.0,
            ThetaSequence::PSeries { c, p } => c / ((k + 1) as f64).powf(p),
            ThetaSequence::Geometric { c, r } => c * r.powi(k as i32),
            ThetaSequence::Constant { c } => c,
        }
    }

    /// Upper bound on the infinite sum, `None` when it diverges.
    pub fn sum_bound(&self) -> Option<f64> {
        match *self {
            ThetaSequence::Zero => Some(0.0),
            // 1 + ∫₁^∞ t^{−p} dt
            ThetaSequence::PSeries { c, p } if p > 1.0 => Some(c * (1.0 + 1.0 / (p - 1.0))),
            ThetaSequence::Geometric { c, r } if (0.0..1.0).contains(&r) => Some(c / (1.0 - r)),
            ThetaSequence::Constant { c: 0.0 } => Some(0.0),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSchedule {
    pub theta_r: ThetaSequence,
    pub theta_gamma: ThetaSequence,
    pub description: String,
}

impl DriftSchedule {
    pub fn constant_parameters() -> Self {
        Self {
            theta_r: ThetaSequence::Zero,
            theta_gamma: ThetaSequence::Zero,
            description: "no drift".into(),
        }
    }

    /// `θ_k = c/(k+1)²` on both `R` and `Γ`.
    pub fn inverse_square(c: f64) -> Self {
        let s = ThetaSequence::PSeries { c, p: 2.0 };
        Self {
            theta_r: s,
            theta_gamma: s,
            description: format!("{c}/(k+1)^2"),
        }
    }

    pub fn geometric(c: f64, r: f64) -> Self {
        let s = ThetaSequence::Geometric { c, r };
        Self {
            theta_r: s,
            theta_gamma: s,
            description: format!("{c}*{r}^k"),
        }
    }

    /// Non-summable drift, outside the convergence hypotheses.
    pub fn constant(c: f64) -> Self {
        let s = ThetaSequence::Constant { c };
        Self {
            theta_r: s,
            theta_gamma: s,
            description: format!("constant {c}"),
        }
    }

    pub fn is_summable(&self) -> bool {
        self.theta_r.sum_bound().is_some() && self.theta_gamma.sum_bound().is_some()
    }

    pub fn partial_sum(&self, k: usize) -> f64 {
        (0..k)
            .map(|i| self.theta_r.at(i) + self.theta_gamma.at(i))
            .sum()
    }
}

/// Entry `i` at step `k` moves by the factor `1 + (−1)^{i+k} θ_k`.
fn drifted(values: &[f64], theta: f64, k: usize, lo: f64, hi: f64) -> Vec<f64> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let sign = if (i + k).is_multiple_of(2) { 1.0 } else { -1.0 };
            (v * (1.0 + sign * theta)).clamp(lo, hi)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSample {
    pub iter: usize,
    pub r_inf: f64,
    pub s_inf: f64,
    pub objective_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftOutcome {
    pub schedule: String,
    pub curve: Vec<DriftSample>,
    /// Whether the last sample meets all thresholds.
    pub converged: bool,
    pub first_converged_iter: Option<usize>,
    /// `‖ỹ_{k+1} − y_k‖²_{H_k}` per step.
    pub increment_sq: Vec<f64>,
}

impl DriftOutcome {
    /// Share of `Σ‖ỹ_{k+1} − y_k‖²_H` contributed by steps `k ≥ from`.
    pub fn tail_fraction(&self, from: usize) -> f64 {
        let total: f64 = self.increment_sq.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        self.increment_sq.iter().skip(from).sum::<f64>() / total
    }
}

/// Thresholds for a drift run to count as converged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftThresholds {
    pub residual: f64,
    pub objective_gap: f64,
}

impl Default for DriftThresholds {
    fn default() -> Self {
        Self {
            residual: 1e-6,
            objective_gap: 1e-5,
        }
    }
}

/// Runs `iters` steps while drifting `R`, `Γ` and `alpha_x` by the schedule.
/// The σ block is held fixed.
pub fn run_drift_experiment(
    prob: &QpProblem,
    reference: &ReferenceSolution,
    cfg: &SolverConfig,
    schedule: &DriftSchedule,
    iters: usize,
    thresholds: DriftThresholds,
) -> Result<DriftOutcome> {
    let mut state = SolverState::new(prob, cfg)?;
    let n = prob.n();
    let sigma = state.sigma();
    let mut curve = Vec::with_capacity(iters);
    let mut increment_sq = Vec::with_capacity(iters);
    let mut first = None;

    for k in 0..iters {
        let prev = state.iterate.clone();
        let rho = state.rho.values().to_vec();
        let gamma = full_relaxation(state.alpha_x, n, state.gamma.values());
        if state.iterate_once(prob, cfg).is_err() {
            break;
        }
        let next = &state.iterate;
        let (r, s) = splitting_residuals(&prev, next, &rho, sigma);
        let gap = (prob.objective(&next.x_tilde)? - reference.objective).abs();
        let sample = DriftSample {
            iter: k + 1,
            r_inf: inf_norm(&r),
            s_inf: inf_norm(&s),
            objective_gap: gap,
        };
        let ok = sample.r_inf <= thresholds.residual
            && sample.s_inf <= thresholds.residual
            && sample.objective_gap <= thresholds.objective_gap;
        if ok && first.is_none() {
            first = Some(k + 1);
        }
        curve.push(sample);

        // ‖ΓR e‖²_{(ΓR)⁻¹} = Σ Γ R e²
        let e = stack(&next.x_tilde, &next.z_tilde);
        let base = stack(&prev.x, &prev.z);
        let full_r = full_penalty(sigma, n, &rho);
        increment_sq.push(
            (0..e.len())
                .map(|i| gamma[i] * full_r[i] * (e[i] - base[i]).powi(2))
                .sum(),
        );

        let tr = schedule.theta_r.at(k);
        if tr != 0.0 {
            let values = drifted(&rho, tr, k, cfg.rho_min, cfg.rho_max);
            if values != rho {
                state.set_penalty(prob, DiagParams::new(values, cfg.rho_min, cfg.rho_max)?)?;
            }
        }
        let tg = schedule.theta_gamma.at(k);
        if tg != 0.0 {
            let g = drifted(state.gamma.values(), tg, k, cfg.alpha_min, cfg.alpha_max);
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let ax = (state.alpha_x * (1.0 - sign * tg)).clamp(cfg.alpha_min, cfg.alpha_max);
            state.set_relaxation(DiagParams::new(g, cfg.alpha_min, cfg.alpha_max)?, ax)?;
        }
    }

    let converged = curve.len() == iters
        && curve.last().is_some_and(|s| {
            s.r_inf <= thresholds.residual
                && s.s_inf <= thresholds.residual
                && s.objective_gap <= thresholds.objective_gap
        });
    Ok(DriftOutcome {
        schedule: schedule.description.clone(),
        curve,
        converged,
        first_converged_iter: first,
        increment_sq,
    })
}

/// Per-update relative change `max_i |Γ_new,i / Γ_old,i − 1|` implied by a
/// solve's recorded relaxation history, starting from `gamma0`.
pub fn relaxation_drift(gamma0: &[f64], records: &[crate::engine::RelaxationRecord]) -> Vec<f64> {
    let mut prev = gamma0.to_vec();
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let theta = rec
            .gamma
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a / b - 1.0).abs())
            .fold(0.0, f64::max);
        out.push(theta);
        prev.clone_from(&rec.gamma);
    }
    out
}

/// Summary written by the `verify` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub instance: String,
    pub max_relax_violation: f64,
    pub max_penalty_violation: f64,
    pub min_descent_slack: f64,
    pub drift_converged: Option<bool>,
}

/// Identity and descent checks over a recorded trajectory, plus an optional
/// drift run. Theory violations are returned as errors.
pub fn verify_instance(
    prob: &QpProblem,
    reference: &ReferenceSolution,
    cfg: &SolverConfig,
    policy: &dyn RelaxationPolicy,
    iters: usize,
    drift: Option<(&DriftSchedule, usize)>,
) -> Result<VerifySummary> {
    let trace = record_trace(prob, cfg, policy, iters)?;
    let recon = reconstruct_drs(&trace)?;
    let alpha_max = trace
        .steps
        .iter()
        .flat_map(|s| s.gamma.iter().copied().chain([s.alpha_x]))
        .fold(0.0, f64::max);
    let descent = check_descent(
        &trace,
        &recon,
        reference,
        prob,
        alpha_max.max(cfg.alpha_min),
    )?;
    let drift_converged = match drift {
        Some((schedule, k)) => Some(
            run_drift_experiment(
                prob,
                reference,
                cfg,
                schedule,
                k,
                DriftThresholds::default(),
            )?
            .converged,
        ),
        None => None,
    };
    Ok(VerifySummary {
        instance: prob.name.clone(),
        max_relax_violation: recon.max_relax(),
        max_penalty_violation: recon.max_penalty(),
        min_descent_slack: if descent.relative.is_empty() {
            0.0
        } else {
            descent.min_relative()
        },
        drift_converged,
    })
}
