//! Problem data, constraint classification, residuals and the OSQP stopping rule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, inf_norm, ldlt_factor, DenseMatrix};

/// Magnitude at or above which a bound is read as infinite in problem files.
pub const INFINITY_SENTINEL: f64 = 1e30;

/// Shift added to `P` before the positive-semidefiniteness probe.
const PSD_SHIFT: f64 = 1e-9;

/// Convex QP `min ½xᵀPx + qᵀx  s.t.  l ≤ Ax ≤ u`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DenseMatrix,
    pub q: Vec<f64>,
    pub a: DenseMatrix,
    pub l: Vec<f64>,
    pub u: Vec<f64>,
    pub name: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Equality,
    Inequality,
    Loose,
}

/// Tags every row; `l_i > u_i` is rejected.
pub fn classify(l: &[f64], u: &[f64]) -> Result<Vec<ConstraintKind>> {
    if l.len() != u.len() {
        return Err(Error::Dimension(format!(
            "{} lower bounds, {} upper bounds",
            l.len(),
            u.len()
        )));
    }
    l.iter()
        .zip(u)
        .enumerate()
        .map(|(row, (&lo, &hi))| {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                Err(Error::InfeasibleBounds {
                    row,
                    lower: lo,
                    upper: hi,
                })
            } else if lo == hi && lo.is_finite() {
                Ok(ConstraintKind::Equality)
            } else if lo == f64::NEG_INFINITY && hi == f64::INFINITY {
                Ok(ConstraintKind::Loose)
            } else {
                Ok(ConstraintKind::Inequality)
            }
        })
        .collect()
}

impl QpProblem {
    /// Validates and builds a problem.
    pub fn new(
        name: impl Into<String>,
        p: DenseMatrix,
        q: Vec<f64>,
        a: DenseMatrix,
        l: Vec<f64>,
        u: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let prob = Self {
            p,
            q,
            a,
            l,
            u,
            name: name.into(),
            seed,
        };
        prob.validate()?;
        Ok(prob)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.p.rows()
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.a.rows()
    }

    pub fn kinds(&self) -> Result<Vec<ConstraintKind>> {
        classify(&self.l, &self.u)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let m = self.m();
        if !self.p.is_square() || self.q.len() != n || self.a.cols() != n {
            return Err(Error::Dimension(format!(
                "P is {}x{}, q has {}, A is {}x{}",
                self.p.rows(),
                self.p.cols(),
                self.q.len(),
                self.a.rows(),
                self.a.cols()
            )));
        }
        if self.l.len() != m || self.u.len() != m {
            return Err(Error::Dimension(format!(
                "A has {m} rows but l has {} and u has {}",
                self.l.len(),
                self.u.len()
            )));
        }
        if self.q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("q has non-finite entries".into()));
        }
        if self
            .p
            .entries()
            .iter()
            .chain(self.a.entries())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Input("P or A has non-finite entries".into()));
        }
        classify(&self.l, &self.u)?;

        let scale = 1.0 + inf_norm(self.p.entries());
        if self.p.asymmetry() > 1e-12 * scale {
            return Err(Error::Input("P is not symmetric".into()));
        }
        self.check_psd()?;

        for i in 0..m {
            if self.a.row(i).iter().all(|v| *v == 0.0) && (self.l[i] > 0.0 || self.u[i] < 0.0) {
                return Err(Error::Input(format!(
                    "row {i} of A is zero but its bounds exclude 0"
                )));
            }
        }
        Ok(())
    }

    fn check_psd(&self) -> Result<()> {
        let n = self.n();
        let is_diagonal = (0..n).all(|i| (0..n).all(|j| i == j || self.p[(i, j)] == 0.0));
        if is_diagonal {
            if let Some(i) = (0..n).find(|&i| self.p[(i, i)] + PSD_SHIFT <= 0.0) {
                return Err(Error::Input(format!("P is not PSD (diagonal entry {i})")));
            }
            return Ok(());
        }
        let mut shifted = self.p.clone();
        for i in 0..n {
            shifted[(i, i)] += PSD_SHIFT;
        }
        match ldlt_factor(&shifted) {
            Ok(f) if f.diag().iter().all(|d| *d > 0.0) => Ok(()),
            _ => Err(Error::Input("P is not positive semidefinite".into())),
        }
    }

    /// `½xᵀPx + qᵀx`
    pub fn objective(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n() {
            return Err(Error::Dimension(format!(
                "x has {} entries, problem has n = {}",
                x.len(),
                self.n()
            )));
        }
        let px = self.p.mul_vec(x);
        Ok(0.5 * dot(x, &px) + dot(&self.q, x))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ProblemFile = serde_json::from_str(text)?;
        file.into_problem()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ProblemFile::from(self))?)
    }
}

/// On-disk problem layout; infinities are written as ±1e30.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    name: String,
    n: usize,
    m: usize,
    #[serde(rename = "P")]
    p: Vec<f64>,
    q: Vec<f64>,
    #[serde(rename = "A")]
    a: Vec<f64>,
    l: Vec<f64>,
    u: Vec<f64>,
    seed: u64,
}

fn bound_to_file(v: f64) -> f64 {
    v.clamp(-INFINITY_SENTINEL, INFINITY_SENTINEL)
}

fn bound_from_file(v: f64) -> f64 {
    if v >= INFINITY_SENTINEL {
        f64::INFINITY
    } else if v <= -INFINITY_SENTINEL {
        f64::NEG_INFINITY
    } else {
        v
    }
}

impl From<&QpProblem> for ProblemFile {
    fn from(p: &QpProblem) -> Self {
        Self {
            name: p.name.clone(),
            n: p.n(),
            m: p.m(),
            p: p.p.entries().to_vec(),
            q: p.q.clone(),
            a: p.a.entries().to_vec(),
            l: p.l.iter().copied().map(bound_to_file).collect(),
            u: p.u.iter().copied().map(bound_to_file).collect(),
            seed: p.seed,
        }
    }
}

impl ProblemFile {
    fn into_problem(self) -> Result<QpProblem> {
        let p = DenseMatrix::from_row_major(self.n, self.n, self.p)?;
        let a = DenseMatrix::from_row_major(self.m, self.n, self.a)?;
        QpProblem::new(
            self.name,
            p,
            self.q,
            a,
            self.l.into_iter().map(bound_from_file).collect(),
            self.u.into_iter().map(bound_from_file).collect(),
            self.seed,
        )
    }
}

/// OSQP-form residuals together with the norms that scale the stopping rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    /// `Ax − z`
    pub r_prim: Vec<f64>,
    /// `Px + q + Aᵀy`
    pub r_dual: Vec<f64>,
    pub r_prim_inf: f64,
    pub r_dual_inf: f64,
    pub ax_inf: f64,
    pub z_inf: f64,
    pub px_inf: f64,
    pub aty_inf: f64,
    pub q_inf: f64,
}

impl Residuals {
    /// `max(‖Ax‖∞, ‖z‖∞)`
    pub fn prim_scale(&self) -> f64 {
        self.ax_inf.max(self.z_inf)
    }

    /// `max(‖Px‖∞, ‖Aᵀy‖∞, ‖q‖∞)`
    pub fn dual_scale(&self) -> f64 {
        self.px_inf.max(self.aty_inf).max(self.q_inf)
    }
}

pub fn osqp_residuals(prob: &QpProblem, x: &[f64], z: &[f64], y: &[f64]) -> Result<Residuals> {
    if x.len() != prob.n() || z.len() != prob.m() || y.len() != prob.m() {
        return Err(Error::Dimension(format!(
            "iterate sizes ({}, {}, {}) for n = {}, m = {}",
            x.len(),
            z.len(),
            y.len(),
            prob.n(),
            prob.m()
        )));
    }
    let ax = prob.a.mul_vec(x);
    let px = prob.p.mul_vec(x);
    let aty = prob.a.tr_mul_vec(y);
    let r_prim: Vec<f64> = ax.iter().zip(z).map(|(a, z)| a - z).collect();
    let r_dual: Vec<f64> = px
        .iter()
        .zip(&prob.q)
        .zip(&aty)
        .map(|((p, q), a)| p + q + a)
        .collect();
    Ok(Residuals {
        r_prim_inf: inf_norm(&r_prim),
        r_dual_inf: inf_norm(&r_dual),
        r_prim,
        r_dual,
        ax_inf: inf_norm(&ax),
        z_inf: inf_norm(z),
        px_inf: inf_norm(&px),
        aty_inf: inf_norm(&aty),
        q_inf: inf_norm(&prob.q),
    })
}

/// OSQP stopping rule with `≤` at the boundary.
pub fn terminated(res: &Residuals, eps_abs: f64, eps_rel: f64) -> bool {
    res.r_prim_inf <= eps_abs + eps_rel * res.prim_scale()
        && res.r_dual_inf <= eps_abs + eps_rel * res.dual_scale()
}
