//! Matrix-valued relaxed ADMM in OSQP form.
//!
//! The splitting is fixed: `f` carries the quadratic objective plus the
//! indicator of `Ax̃ = z̃`, `g` is the indicator of the box `[l, u]`, and the
//! consensus constraint pairs the two copies with `A = I`, `B = −I`. Every
//! step solves one system with the cached KKT factor; only a penalty change
//! forces a refactorization. Relaxation `Γ` is per constraint row and may be
//! changed between any two steps at no linear-algebra cost.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{assemble_kkt, ldlt_factor, LdltFactor};
use crate::qp::{osqp_residuals, terminated, ConstraintKind, QpProblem, Residuals};

/// Ratio between equality-row and inequality-row penalties.
pub const EQUALITY_PENALTY_SCALE: f64 = 1e3;

/// Positive diagonal matrix stored as its diagonal, with a bound box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagParams {
    values: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl DiagParams {
    pub fn new(values: Vec<f64>, lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0) || !(lo <= hi) || !hi.is_finite() {
            return Err(Error::Input(format!("invalid bound box [{lo}, {hi}]")));
        }
        if let Some(i) = values.iter().position(|v| !(*v >= lo && *v <= hi)) {
            return Err(Error::Input(format!(
                "entry {i} = {} outside [{lo}, {hi}]",
                values[i]
            )));
        }
        Ok(Self { values, lo, hi })
    }

    /// Clamps every value into `[lo, hi]`. Non-finite values are rejected.
    pub fn clamped(values: Vec<f64>, lo: f64, hi: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite diagonal entry".into()));
        }
        Self::new(
            values.into_iter().map(|v| v.clamp(lo, hi)).collect(),
            lo,
            hi,
        )
    }

    pub fn constant(len: usize, value: f64, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![value; len], lo, hi)
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn lo(&self) -> f64 {
        self.lo
    }

    #[inline]
    pub fn hi(&self) -> f64 {
        self.hi
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Hidden fault injected into the iteration, used to check that the theory
/// verifier notices a broken update.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    FlipRelaxationSign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub rho0: f64,
    pub adaptive_rho: bool,
    pub alpha0: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub stage_length: usize,
    pub freeze_iter: usize,
    pub rho_check_interval: usize,
    pub sigma: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    /// ρ changes only when the candidate differs by at least this factor.
    pub rho_trigger: f64,
    pub seed: u64,
    #[doc(hidden)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault: Option<Fault>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho0: 0.1,
            adaptive_rho: false,
            alpha0: 1.6,
            alpha_min: 1.25,
            alpha_max: 1.95,
            eps_abs: 1e-3,
            eps_rel: 1e-3,
            max_iter: 20_000,
            stage_length: 10,
            freeze_iter: 500,
            rho_check_interval: 25,
            sigma: 1e-6,
            rho_min: 1e-6,
            rho_max: 1e6,
            rho_trigger: 5.0,
            seed: 0,
            fault: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Input(format!("invalid solver config: {what}")));
        if !(self.rho_min > 0.0 && self.rho_min <= self.rho0 && self.rho0 <= self.rho_max) {
            return bad("need 0 < rho_min <= rho0 <= rho_max");
        }
        if !(self.alpha_min > 0.0
            && self.alpha_min <= self.alpha0
            && self.alpha0 <= self.alpha_max
            && self.alpha_max < 2.0)
        {
            return bad("need 0 < alpha_min <= alpha0 <= alpha_max < 2");
        }
        if !(self.eps_abs > 0.0 && self.eps_rel >= 0.0) {
            return bad("tolerances must be positive");
        }
        if self.max_iter == 0 || self.stage_length == 0 || self.rho_check_interval == 0 {
            return bad("max_iter, stage_length and rho_check_interval must be >= 1");
        }
        if !(self.sigma > 0.0) || !(self.rho_trigger >= 1.0) {
            return bad("sigma must be positive and rho_trigger >= 1");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Penalty vector for a scalar ρ: `ρ` on inequality and loose rows,
    /// `10³ρ` on equality rows, clamped to `[rho_min, rho_max]`.
    pub fn penalty_pattern(&self, kinds: &[ConstraintKind], rho: f64) -> Result<DiagParams> {
        let values = kinds
            .iter()
            .map(|k| match k {
                ConstraintKind::Equality => EQUALITY_PENALTY_SCALE * rho,
                ConstraintKind::Inequality | ConstraintKind::Loose => rho,
            })
            .collect();
        DiagParams::clamped(values, self.rho_min, self.rho_max)
    }
}

/// Primal-dual iterate of the consensus splitting.
///
/// `(x_tilde, z_tilde)` is the most recent minimizer of the equality-
/// constrained subproblem; `(x, z)` is the projected copy and `y` the dual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    pub x_tilde: Vec<f64>,
    pub z_tilde: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SolverState {
    pub iterate: Iterate,
    pub iter: usize,
    pub rho: DiagParams,
    pub gamma: DiagParams,
    /// Relaxation applied to the `n` decision coordinates.
    pub alpha_x: f64,
    pub rho_scalar: f64,
    pub rho_updates: usize,
    pub factorizations: usize,
    pub frozen: bool,
    kinds: Vec<ConstraintKind>,
    kkt: LdltFactor,
    sigma: f64,
    rhs: Vec<f64>,
}

impl SolverState {
    /// Cold start `x = z = y = 0` with one KKT factorization.
    pub fn new(prob: &QpProblem, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let kinds = prob.kinds()?;
        let rho = cfg.penalty_pattern(&kinds, cfg.rho0)?;
        let gamma = DiagParams::constant(prob.m(), cfg.alpha0, cfg.alpha_min, cfg.alpha_max)?;
        let kkt = factor_kkt(prob, cfg.sigma, &rho)?;
        let (n, m) = (prob.n(), prob.m());
        Ok(Self {
            iterate: Iterate {
                x: vec![0.0; n],
                z: vec![0.0; m],
                y: vec![0.0; m],
                x_tilde: vec![0.0; n],
                z_tilde: vec![0.0; m],
            },
            iter: 0,
            rho,
            gamma,
            alpha_x: cfg.alpha0,
            rho_scalar: cfg.rho0,
            rho_updates: 0,
            factorizations: 1,
            frozen: false,
            kinds,
            kkt,
            sigma: cfg.sigma,
            rhs: vec![0.0; n + m],
        })
    }

    pub fn x(&self) -> &[f64] {
        &self.iterate.x
    }

    pub fn z(&self) -> &[f64] {
        &self.iterate.z
    }

    pub fn y(&self) -> &[f64] {
        &self.iterate.y
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn kinds(&self) -> &[ConstraintKind] {
        &self.kinds
    }

    pub fn kkt(&self) -> &LdltFactor {
        &self.kkt
    }

    /// One matrix-valued relaxed ADMM step with the current `R`, `Γ`, `alpha_x`.
    pub fn iterate_once(&mut self, prob: &QpProblem, cfg: &SolverConfig) -> Result<()> {
        let n = prob.n();
        let m = prob.m();
        let rho = self.rho.values();
        let gamma = self.gamma.values();
        let it = &mut self.iterate;

        // KKT right-hand side [σx − q; z − R⁻¹y].
        for j in 0..n {
            self.rhs[j] = self.sigma * it.x[j] - prob.q[j];
        }
        for i in 0..m {
            self.rhs[n + i] = it.z[i] - it.y[i] / rho[i];
        }
        let sol = self.kkt.solve(&self.rhs)?;
        let (x_tilde, nu) = sol.split_at(n);

        let ax = self.alpha_x;
        for j in 0..n {
            it.x_tilde[j] = x_tilde[j];
            it.x[j] = ax * x_tilde[j] + (1.0 - ax) * it.x[j];
        }
        for i in 0..m {
            let z_prev = it.z[i];
            let y_prev = it.y[i];
            let z_tilde = z_prev + (nu[i] - y_prev) / rho[i];
            let w = match cfg.fault {
                None => gamma[i] * z_tilde + (1.0 - gamma[i]) * z_prev,
                Some(Fault::FlipRelaxationSign) => gamma[i] * z_tilde - (1.0 - gamma[i]) * z_prev,
            };
            let z_next = (w + y_prev / rho[i]).clamp(prob.l[i], prob.u[i]);
            it.z_tilde[i] = z_tilde;
            it.z[i] = z_next;
            it.y[i] = y_prev + rho[i] * (w - z_next);
        }
        self.iter += 1;

        let finite = it.x.iter().chain(&it.z).chain(&it.y).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Divergence { iter: self.iter });
        }
        Ok(())
    }

    /// Residual-balancing penalty update. Returns whether the KKT matrix was
    /// refactored.
    pub fn maybe_update_rho(
        &mut self,
        prob: &QpProblem,
        cfg: &SolverConfig,
        res: &Residuals,
    ) -> Result<bool> {
        let candidate = rho_candidate(self.rho_scalar, res, cfg);
        let rho = self.rho_scalar;
        if candidate / rho >= cfg.rho_trigger || rho / candidate >= cfg.rho_trigger {
            self.rho_scalar = candidate;
            let pattern = cfg.penalty_pattern(&self.kinds, candidate)?;
            self.refactor(prob, pattern)?;
            self.rho_updates += 1;
            return Ok(true);
        }
        Ok(false)
    }

    /// Replaces `R` directly and refactors. Used by drift experiments; does not
    /// count as a ρ update.
    pub fn set_penalty(&mut self, prob: &QpProblem, rho: DiagParams) -> Result<()> {
        if rho.len() != prob.m() {
            return Err(Error::Dimension(format!(
                "{} penalty entries for m = {}",
                rho.len(),
                prob.m()
            )));
        }
        self.refactor(prob, rho)
    }

    /// Replaces `Γ` and `alpha_x` directly. No refactorization.
    pub fn set_relaxation(&mut self, gamma: DiagParams, alpha_x: f64) -> Result<()> {
        if gamma.len() != self.gamma.len() {
            return Err(Error::Dimension(format!(
                "{} relaxation entries for m = {}",
                gamma.len(),
                self.gamma.len()
            )));
        }
        if !(alpha_x >= gamma.lo() && alpha_x <= gamma.hi()) {
            return Err(Error::Input(format!("alpha_x = {alpha_x} outside bounds")));
        }
        self.gamma = gamma;
        self.alpha_x = alpha_x;
        Ok(())
    }

    fn refactor(&mut self, prob: &QpProblem, rho: DiagParams) -> Result<()> {
        self.kkt = factor_kkt(prob, self.sigma, &rho)?;
        self.rho = rho;
        self.factorizations += 1;
        Ok(())
    }

    /// Queries the relaxation policy, unless the freeze point has been reached.
    /// Returns whether `Γ` changed.
    pub fn apply_policy(
        &mut self,
        prob: &QpProblem,
        cfg: &SolverConfig,
        policy: &dyn RelaxationPolicy,
        residuals: &Residuals,
        prev_residuals: &Residuals,
    ) -> Result<bool> {
        if self.iter >= cfg.freeze_iter {
            self.frozen = true;
            return Ok(false);
        }
        let update = policy.relaxation(&PolicyInput {
            prob,
            state: self,
            residuals,
            prev_residuals,
        })?;
        if update.gamma.len() != prob.m() {
            return Err(Error::Policy(format!(
                "policy returned {} entries for m = {}",
                update.gamma.len(),
                prob.m()
            )));
        }
        if !update.alpha_x.is_finite() || update.gamma.iter().any(|v| !v.is_finite()) {
            return Err(Error::Policy("non-finite relaxation output".into()));
        }
        let gamma = DiagParams::clamped(update.gamma, cfg.alpha_min, cfg.alpha_max)?;
        let alpha_x = update.alpha_x.clamp(cfg.alpha_min, cfg.alpha_max);
        let changed = gamma != self.gamma || alpha_x.to_bits() != self.alpha_x.to_bits();
        self.gamma = gamma;
        self.alpha_x = alpha_x;
        Ok(changed)
    }
}

fn factor_kkt(prob: &QpProblem, sigma: f64, rho: &DiagParams) -> Result<LdltFactor> {
    let kkt = assemble_kkt(&prob.p, &prob.a, sigma, rho.values())?;
    ldlt_factor(&kkt).map_err(|e| match e {
        Error::SingularKkt { .. } => Error::Setup(e.to_string()),
        other => other,
    })
}

/// Candidate scalar penalty from the normalized residual ratio, clamped.
pub fn rho_candidate(rho: f64, res: &Residuals, cfg: &SolverConfig) -> f64 {
    let prim = res.r_prim_inf / res.prim_scale().max(1e-10);
    let dual = res.r_dual_inf / res.dual_scale().max(1e-10);
    let ratio = if dual > 0.0 {
        prim / dual
    } else if prim > 0.0 {
        f64::INFINITY
    } else {
        1.0
    };
    (rho * ratio.sqrt()).clamp(cfg.rho_min, cfg.rho_max)
}

/// Residuals of the consensus splitting `r = Ax + Bz − c`, `s = AᵀR B Δz`
/// with `A = I`, `B = −I`, `c = 0`, laid out as `[x-block; z-block]`.
///
/// `rho` is the penalty used for the step from `prev` to `next`; the
/// x-block penalty is `sigma`.
pub fn splitting_residuals(
    prev: &Iterate,
    next: &Iterate,
    rho: &[f64],
    sigma: f64,
) -> (Vec<f64>, Vec<f64>) {
    let r = next
        .x_tilde
        .iter()
        .zip(&next.x)
        .chain(next.z_tilde.iter().zip(&next.z))
        .map(|(t, v)| t - v)
        .collect();
    let s = next
        .x
        .iter()
        .zip(&prev.x)
        .map(|(a, b)| -sigma * (a - b))
        .chain(
            next.z
                .iter()
                .zip(&prev.z)
                .zip(rho)
                .map(|((a, b), r)| -r * (a - b)),
        )
        .collect();
    (r, s)
}

/// What a relaxation policy sees when it is queried.
pub struct PolicyInput<'a> {
    pub prob: &'a QpProblem,
    pub state: &'a SolverState,
    /// Residuals at the current iterate.
    pub residuals: &'a Residuals,
    /// Residuals at the previous query (one stage earlier).
    pub prev_residuals: &'a Residuals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationUpdate {
    pub gamma: Vec<f64>,
    pub alpha_x: f64,
}

pub trait RelaxationPolicy: Send + Sync {
    fn relaxation(&self, input: &PolicyInput<'_>) -> Result<RelaxationUpdate>;

    fn label(&self) -> String;
}

/// `Γ ≡ α·I` for all iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedRelaxation(pub f64);

impl Default for FixedRelaxation {
    fn default() -> Self {
        Self(1.6)
    }
}

impl RelaxationPolicy for FixedRelaxation {
    fn relaxation(&self, input: &PolicyInput<'_>) -> Result<RelaxationUpdate> {
        Ok(RelaxationUpdate {
            gamma: vec![self.0; input.prob.m()],
            alpha_x: self.0,
        })
    }

    fn label(&self) -> String {
        "fixed".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Solved,
    MaxIter,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Solved => "solved",
            SolveStatus::MaxIter => "max_iter",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSample {
    pub iter: usize,
    pub r_prim: f64,
    pub r_dual: f64,
}

/// A change of `Γ` made by the policy at a stage boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxationRecord {
    pub iter: usize,
    pub alpha_x: f64,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub problem: String,
    pub policy: String,
    pub status: SolveStatus,
    pub iterations: usize,
    pub rho_updates: usize,
    pub factorizations: usize,
    pub rho_final: f64,
    pub runtime_seconds: f64,
    pub objective: f64,
    pub r_prim_inf: f64,
    pub r_dual_inf: f64,
    /// First iteration at which a policy query was skipped by the freeze rule.
    pub frozen_at: Option<usize>,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    pub relaxation_updates: Vec<RelaxationRecord>,
    pub residual_history: Vec<ResidualSample>,
}

impl SolveReport {
    pub fn write_residual_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iter,r_prim,r_dual")?;
        for s in &self.residual_history {
            writeln!(out, "{},{:.16e},{:.16e}", s.iter, s.r_prim, s.r_dual)?;
        }
        Ok(())
    }
}

/// Parameters in force for one step, reported to observers.
pub struct Step<'a> {
    pub state: &'a SolverState,
    pub residuals: &'a Residuals,
    pub rho_used: &'a [f64],
    pub gamma_used: &'a [f64],
    pub alpha_x_used: f64,
    pub refactored: bool,
}

/// Hooks into the solve loop.
pub trait SolveObserver {
    fn on_start(&mut self, _state: &SolverState) {}

    fn on_step(&mut self, _step: &Step<'_>) {}

    /// Whether `on_step` needs the parameters used by each step.
    fn wants_steps(&self) -> bool {
        false
    }
}

impl SolveObserver for () {}

pub fn solve(
    prob: &QpProblem,
    cfg: &SolverConfig,
    policy: &dyn RelaxationPolicy,
) -> Result<SolveReport> {
    solve_observed(prob, cfg, policy, &mut ())
}

pub fn solve_observed(
    prob: &QpProblem,
    cfg: &SolverConfig,
    policy: &dyn RelaxationPolicy,
    observer: &mut dyn SolveObserver,
) -> Result<SolveReport> {
    let start = Instant::now();
    let mut state = SolverState::new(prob, cfg)?;
    observer.on_start(&state);
    let observing = observer.wants_steps();

    let mut res = osqp_residuals(prob, state.x(), state.z(), state.y())?;
    let mut stage_prev = res.clone();
    let mut history = Vec::new();
    let mut relaxation_updates = Vec::new();
    let mut frozen_at = None;
    let mut status = SolveStatus::MaxIter;

    while state.iter < cfg.max_iter {
        if state.iter % cfg.stage_length == 0 {
            let was_frozen = state.frozen;
            if state.apply_policy(prob, cfg, policy, &res, &stage_prev)? {
                relaxation_updates.push(RelaxationRecord {
                    iter: state.iter,
                    alpha_x: state.alpha_x,
                    gamma: state.gamma.values().to_vec(),
                });
            }
            if state.frozen && !was_frozen {
                frozen_at = Some(state.iter);
            }
            stage_prev = res.clone();
        }

        let used = observing.then(|| {
            (
                state.rho.values().to_vec(),
                state.gamma.values().to_vec(),
                state.alpha_x,
            )
        });
        state.iterate_once(prob, cfg)?;
        res = osqp_residuals(prob, state.x(), state.z(), state.y())?;
        history.push(ResidualSample {
            iter: state.iter,
            r_prim: res.r_prim_inf,
            r_dual: res.r_dual_inf,
        });

        let done = terminated(&res, cfg.eps_abs, cfg.eps_rel);
        let refactored = !done
            && cfg.adaptive_rho
            && state.iter % cfg.rho_check_interval == 0
            && state.maybe_update_rho(prob, cfg, &res)?;

        if let Some((rho_used, gamma_used, alpha_x_used)) = &used {
            observer.on_step(&Step {
                state: &state,
                residuals: &res,
                rho_used,
                gamma_used,
                alpha_x_used: *alpha_x_used,
                refactored,
            });
        }
        if done {
            status = SolveStatus::Solved;
            break;
        }
    }

    Ok(SolveReport {
        problem: prob.name.clone(),
        policy: policy.label(),
        status,
        iterations: state.iter,
        rho_updates: state.rho_updates,
        factorizations: state.factorizations,
        rho_final: state.rho_scalar,
        runtime_seconds: start.elapsed().as_secs_f64(),
        objective: prob.objective(state.x())?,
        r_prim_inf: res.r_prim_inf,
        r_dual_inf: res.r_dual_inf,
        frozen_at,
        x: state.iterate.x,
        z: state.iterate.z,
        y: state.iterate.y,
        relaxation_updates,
        residual_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;

    fn one_dim(q: f64) -> QpProblem {
        QpProblem::new(
            "1d",
            DenseMatrix::identity(1),
            vec![q],
            DenseMatrix::identity(1),
            vec![0.0],
            vec![1.0],
            0,
        )
        .unwrap()
    }

    fn mixed_rows() -> QpProblem {
        QpProblem::new(
            "mixed",
            DenseMatrix::identity(2),
            vec![1.0, -1.0],
            DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]),
            vec![1.0, -1.0, f64::NEG_INFINITY],
            vec![1.0, 1.0, f64::INFINITY],
            0,
        )
        .unwrap()
    }

    #[test]
    fn init_defaults() {
        let prob = mixed_rows();
        let s = SolverState::new(&prob, &SolverConfig::default()).unwrap();
        assert_eq!(s.gamma.values(), &[1.6; 3]);
        assert_eq!(s.rho.values()[0], 100.0);
        assert_eq!(s.rho.values()[1], 0.1);
        assert_eq!(s.rho.values()[2], 0.1);
        assert_eq!(s.factorizations, 1);
        assert!(s.x().iter().chain(s.z()).chain(s.y()).all(|v| *v == 0.0));
    }

    #[test]
    fn trivial_fixed_point() {
        let prob = one_dim(0.0);
        let cfg = SolverConfig {
            alpha0: 1.0,
            alpha_min: 1.0,
            ..SolverConfig::default()
        };
        let mut s = SolverState::new(&prob, &cfg).unwrap();
        s.iterate_once(&prob, &cfg).unwrap();
        assert_eq!(s.x(), &[0.0]);
        assert_eq!(s.z(), &[0.0]);
        assert_eq!(s.y(), &[0.0]);
        let res = osqp_residuals(&prob, s.x(), s.z(), s.y()).unwrap();
        assert_eq!(res.r_prim_inf, 0.0);
        assert_eq!(res.r_dual_inf, 0.0);
    }

    #[test]
    fn one_step_hand_arithmetic() {
        // min ½x² − x, 0 ≤ x ≤ 1, σ = 1, ρ = 1, α = 1 from zero:
        // [[2, 1], [1, −1]] [x̃; ν] = [1; 0] → x̃ = ν = 1/3, z̃ = 1/3,
        // z = Π(1/3) = 1/3, y = 0.
        let prob = one_dim(-1.0);
        let cfg = SolverConfig {
            alpha0: 1.0,
            alpha_min: 1.0,
            sigma: 1.0,
            rho0: 1.0,
            ..SolverConfig::default()
        };
        let mut s = SolverState::new(&prob, &cfg).unwrap();
        let prev = s.iterate.clone();
        s.iterate_once(&prob, &cfg).unwrap();
        let third = 1.0 / 3.0;
        assert!((s.x()[0] - third).abs() < 1e-15);
        assert!((s.z()[0] - third).abs() < 1e-15);
        assert!(s.y()[0].abs() < 1e-15);
        let (r, sres) = splitting_residuals(&prev, &s.iterate, s.rho.values(), cfg.sigma);
        assert!(r.iter().all(|v| v.abs() < 1e-15));
        assert!((sres[0] + third).abs() < 1e-15);
        assert!((sres[1] + third).abs() < 1e-15);
    }

    #[test]
    fn zero_step_gives_zero_dual_residual() {
        let it = Iterate {
            x: vec![1.0],
            z: vec![2.0],
            y: vec![0.0],
            x_tilde: vec![1.0],
            z_tilde: vec![2.0],
        };
        let (_, s) = splitting_residuals(&it, &it, &[0.1], 1e-6);
        assert!(s.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rho_candidate_examples() {
        let cfg = SolverConfig::default();
        let mut res = osqp_residuals(&one_dim(0.0), &[0.0], &[0.0], &[0.0]).unwrap();
        res.r_prim_inf = 1.0;
        res.r_dual_inf = 1.0;
        res.ax_inf = 1.0;
        res.px_inf = 1.0;
        assert!((rho_candidate(0.1, &res, &cfg) - 0.1).abs() < 1e-15);
        res.r_prim_inf = 100.0;
        assert!((rho_candidate(0.1, &res, &cfg) - 1.0).abs() < 1e-12);
        res.r_prim_inf = 0.0;
        assert_eq!(rho_candidate(0.1, &res, &cfg), cfg.rho_min);
    }

    #[test]
    fn rho_update_refactors() {
        let prob = mixed_rows();
        let cfg = SolverConfig::default();
        let mut s = SolverState::new(&prob, &cfg).unwrap();
        let mut res = osqp_residuals(&prob, s.x(), s.z(), s.y()).unwrap();
        res.r_prim_inf = 1.0;
        res.r_dual_inf = 1.0;
        res.ax_inf = 1.0;
        assert!(!s.maybe_update_rho(&prob, &cfg, &res).unwrap());
        res.r_prim_inf = 100.0;
        assert!(s.maybe_update_rho(&prob, &cfg, &res).unwrap());
        assert_eq!(s.rho_updates, 1);
        assert_eq!(s.factorizations, 2);
        assert!((s.rho_scalar - 1.0).abs() < 1e-12);
        assert!((s.rho.values()[0] - 1e3).abs() < 1e-9);
    }

    #[test]
    fn fixed_policy_keeps_gamma() {
        let prob = mixed_rows();
        let cfg = SolverConfig::default();
        let rep = solve(&prob, &cfg, &FixedRelaxation(1.6)).unwrap();
        assert_eq!(rep.status, SolveStatus::Solved);
        assert!(rep.relaxation_updates.is_empty());
        assert_eq!(rep.factorizations, 1);
    }

    struct Ramp;

    impl RelaxationPolicy for Ramp {
        fn relaxation(&self, input: &PolicyInput<'_>) -> Result<RelaxationUpdate> {
            let a = 1.3 + 0.001 * input.state.iter as f64;
            Ok(RelaxationUpdate {
                gamma: vec![a; input.prob.m()],
                alpha_x: a,
            })
        }

        fn label(&self) -> String {
            "ramp".into()
        }
    }

    struct Broken;

    impl RelaxationPolicy for Broken {
        fn relaxation(&self, input: &PolicyInput<'_>) -> Result<RelaxationUpdate> {
            Ok(RelaxationUpdate {
                gamma: vec![f64::NAN; input.prob.m()],
                alpha_x: 1.6,
            })
        }

        fn label(&self) -> String {
            "broken".into()
        }
    }

    #[test]
    fn freeze_stops_updates() {
        let prob = mixed_rows();
        let cfg = SolverConfig {
            freeze_iter: 30,
            eps_abs: 1e-14,
            eps_rel: 1e-14,
            max_iter: 60,
            ..SolverConfig::default()
        };
        let rep = solve(&prob, &cfg, &Ramp).unwrap();
        assert_eq!(rep.frozen_at, Some(30));
        assert!(rep.relaxation_updates.iter().all(|r| r.iter < 30));
        assert_eq!(rep.relaxation_updates.last().unwrap().iter, 20);
    }

    #[test]
    fn non_finite_policy_output_is_rejected() {
        let prob = mixed_rows();
        let cfg = SolverConfig::default();
        let mut s = SolverState::new(&prob, &cfg).unwrap();
        let res = osqp_residuals(&prob, s.x(), s.z(), s.y()).unwrap();
        let before = s.gamma.clone();
        let err = s.apply_policy(&prob, &cfg, &Broken, &res, &res);
        assert!(matches!(err, Err(Error::Policy(_))));
        assert_eq!(s.gamma, before);
    }

    #[test]
    fn max_iter_status() {
        let prob = mixed_rows();
        let cfg = SolverConfig {
            max_iter: 1,
            ..SolverConfig::default()
        };
        let rep = solve(&prob, &cfg, &FixedRelaxation::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::MaxIter);
        assert_eq!(rep.iterations, 1);
    }

    #[test]
    fn config_json_defaults_and_rejections() {
        let cfg = SolverConfig::from_json(r#"{"adaptive_rho": true}"#).unwrap();
        assert!(cfg.adaptive_rho);
        assert_eq!(cfg.rho0, 0.1);
        assert!(SolverConfig::from_json(r#"{"alpha_max": 2.5}"#).is_err());
        assert!(SolverConfig::from_json(r#"{"unknown": 1}"#).is_err());
    }

    mod props {
        use super::super::*;
        use crate::suite::random_qp;
        use proptest::prelude::*;

        /// Γ drawn per query from a hash of the iteration.
        struct Jitter(u64);

        impl RelaxationPolicy for Jitter {
            fn relaxation(&self, input: &PolicyInput<'_>) -> Result<RelaxationUpdate> {
                let mut s = crate::rng::Stream::from_seed(self.0 ^ input.state.iter as u64);
                Ok(RelaxationUpdate {
                    gamma: (0..input.prob.m())
                        .map(|_| 1.0 + 1.2 * s.uniform())
                        .collect(),
                    alpha_x: 1.0 + 1.2 * s.uniform(),
                })
            }

            fn label(&self) -> String {
                "jitter".into()
            }
        }

        struct Bounds<'a>(&'a QpProblem, bool);

        impl SolveObserver for Bounds<'_> {
            fn on_step(&mut self, step: &Step<'_>) {
                let it = &step.state.iterate;
                self.1 &= (0..self.0.m()).all(|i| it.z[i] >= self.0.l[i] && it.z[i] <= self.0.u[i]);
                self.1 &= step.gamma_used.iter().all(|g| (1.25..=1.95).contains(g));
                self.1 &= (1.25..=1.95).contains(&step.alpha_x_used);
            }

            fn wants_steps(&self) -> bool {
                true
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn iterates_stay_feasible_and_relaxation_clamped(
                n in 2usize..12, m in 1usize..12, seed in 0u64..1000, adaptive: bool,
            ) {
                let prob = random_qp(n, m, seed).unwrap();
                let cfg = SolverConfig { adaptive_rho: adaptive, max_iter: 300, ..SolverConfig::default() };
                let mut obs = Bounds(&prob, true);
                let rep = solve_observed(&prob, &cfg, &Jitter(seed), &mut obs).unwrap();
                prop_assert!(obs.1);
                prop_assert_eq!(rep.factorizations, 1 + rep.rho_updates);
                if !adaptive {
                    prop_assert_eq!(rep.factorizations, 1);
                }
            }
        }
    }
}
