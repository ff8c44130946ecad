//! Benchmark problem families, reference solutions and the instance store.
//!
//! Generators are pure functions of `(family, size, seed)`. Each family is
//! built to be feasible by construction:
//!
//! * `random_qp`: `P = MᵀM + 10⁻²I` with a 15%-dense Gaussian `M`, Gaussian
//!   `q` and dense Gaussian `A` with `m = ⌈n/2⌉`, bounds `−U[0,1] ≤ Ax ≤ U[0,1]`.
//! * `portfolio`: factor model with `k = ⌈n/10⌉` factors, a budget row and
//!   long-only bounds.
//! * `lasso`: epigraph form with a `10n × n` design and a 10%-sparse truth.
//! * `svm`: hinge loss over two Gaussian classes of `5n` samples each.
//! * `control`: condensed finite-horizon LQR with a Riccati terminal cost;
//!   the size is the state dimension.
//! * `mpc`: sparse MPC over a fixed stable system; only `x₀` depends on the
//!   seed. The size is the state dimension with `n_u = ⌈n_x/2⌉`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{solve, FixedRelaxation, SolveStatus, SolverConfig};
use crate::error::{Error, Result};
use crate::linalg::{assemble_kkt, inf_norm, ldlt_factor, DenseMatrix};
use crate::qp::{osqp_residuals, ConstraintKind, QpProblem};
use crate::rng::Stream;

/// Prediction horizon of the control and MPC families.
pub const HORIZON: usize = 10;

pub const RANDOM_QP_TEST_SIZES: [usize; 10] = [500, 501, 503, 507, 515, 531, 562, 625, 750, 999];
pub const CONTROL_TEST_SIZES: [usize; 10] = [200, 201, 203, 205, 210, 219, 235, 262, 311, 399];
pub const SMALL_FAMILY_TEST_SIZES: [usize; 10] = [50, 51, 52, 54, 58, 63, 72, 87, 110, 149];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    RandomQp,
    Portfolio,
    Lasso,
    Svm,
    Control,
    Mpc,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::RandomQp,
        Family::Portfolio,
        Family::Lasso,
        Family::Svm,
        Family::Control,
        Family::Mpc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::RandomQp => "random_qp",
            Family::Portfolio => "portfolio",
            Family::Lasso => "lasso",
            Family::Svm => "svm",
            Family::Control => "control",
            Family::Mpc => "mpc",
        }
    }

    /// Size used for training and validation instances.
    pub fn train_size(self) -> usize {
        match self {
            Family::RandomQp => 250,
            Family::Portfolio | Family::Lasso | Family::Svm => 20,
            Family::Control | Family::Mpc => 100,
        }
    }

    /// Sizes of the held-out test grid.
    pub fn test_sizes(self) -> Vec<usize> {
        match self {
            Family::RandomQp => RANDOM_QP_TEST_SIZES.to_vec(),
            Family::Portfolio | Family::Lasso | Family::Svm => SMALL_FAMILY_TEST_SIZES.to_vec(),
            Family::Control => CONTROL_TEST_SIZES.to_vec(),
            Family::Mpc => vec![100],
        }
    }

    /// Small size that keeps dense factorizations cheap.
    pub fn desk_size(self) -> usize {
        match self {
            Family::RandomQp => 50,
            Family::Portfolio | Family::Lasso | Family::Svm => 20,
            Family::Control => 20,
            Family::Mpc => 20,
        }
    }

    /// Admissible size parameters.
    pub fn size_range(self) -> std::ops::RangeInclusive<usize> {
        match self {
            Family::RandomQp => 2..=1000,
            Family::Portfolio | Family::Lasso | Family::Svm => 2..=200,
            Family::Control => 2..=400,
            Family::Mpc => 2..=100,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown family '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FamilySpec {
    pub family: Family,
    pub size: usize,
    pub seed: u64,
    pub split: Split,
}

impl FamilySpec {
    pub fn new(family: Family, size: usize, seed: u64, split: Split) -> Self {
        Self {
            family,
            size,
            seed,
            split,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.family.size_range().contains(&self.size) {
            return Err(Error::Input(format!(
                "size {} outside the {} range {:?}",
                self.size,
                self.family,
                self.family.size_range()
            )));
        }
        Ok(())
    }

    pub fn instance_name(&self) -> String {
        format!("{}_{}_{}", self.family, self.size, self.seed)
    }
}

/// Deterministic instance for a spec.
pub fn generate(spec: &FamilySpec) -> Result<QpProblem> {
    spec.validate()?;
    let name = spec.instance_name();
    let (n, s) = (spec.size, spec.seed);
    let parts = match spec.family {
        Family::RandomQp => random_qp_parts(n, n.div_ceil(2), s),
        Family::Portfolio => portfolio_parts(n, s),
        Family::Lasso => lasso_parts(n, s),
        Family::Svm => svm_parts(n, s),
        Family::Control => control_parts(n, s)?,
        Family::Mpc => mpc_parts(n, s)?,
    };
    parts.build(name, s)
}

/// Random QP with explicit dimensions, drawn from the `random_qp` streams.
pub fn random_qp(n: usize, m: usize, seed: u64) -> Result<QpProblem> {
    random_qp_parts(n, m, seed).build(format!("random_qp_{n}x{m}_{seed}"), seed)
}

struct Parts {
    p: DenseMatrix,
    q: Vec<f64>,
    a: DenseMatrix,
    l: Vec<f64>,
    u: Vec<f64>,
}

impl Parts {
    fn build(self, name: String, seed: u64) -> Result<QpProblem> {
        QpProblem::new(
            name,
            symmetrize(self.p),
            self.q,
            self.a,
            self.l,
            self.u,
            seed,
        )
    }
}

fn symmetrize(mut p: DenseMatrix) -> DenseMatrix {
    for i in 0..p.rows() {
        for j in 0..i {
            let v = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
    p
}

fn masked_normal(
    rows: usize,
    cols: usize,
    density: f64,
    values: &mut Stream,
    mask: &mut Stream,
) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let v = values.normal();
            if mask.bernoulli(density) {
                m[(i, j)] = v;
            }
        }
    }
    m
}

fn random_qp_parts(n: usize, m: usize, seed: u64) -> Parts {
    let st = |tag: &str| Stream::new("random_qp", n, seed, tag);
    let mf = masked_normal(n, n, 0.15, &mut st("M"), &mut st("M_mask"));
    let mut p = mf.transpose().matmul(&mf).expect("square");
    for i in 0..n {
        p[(i, i)] += 1e-2;
    }
    let q = st("q").normals(n);
    let mut a = DenseMatrix::zeros(m, n);
    let mut a_st = st("A");
    for i in 0..m {
        for v in a.row_mut(i) {
            *v = a_st.normal();
        }
    }
    let l = st("l").uniforms(m).into_iter().map(|v| -v).collect();
    let u = st("u").uniforms(m);
    Parts { p, q, a, l, u }
}

fn portfolio_parts(n: usize, seed: u64) -> Parts {
    let st = |tag: &str| Stream::new("portfolio", n, seed, tag);
    let k = n.div_ceil(10);
    let f = masked_normal(n, k, 0.5, &mut st("F"), &mut st("F_mask"));
    let d: Vec<f64> = st("D")
        .uniforms(n)
        .into_iter()
        .map(|v| v * (k as f64).sqrt())
        .collect();
    let mu = st("mu").normals(n);
    let gamma = 1.0;

    let nv = n + k;
    let mut p = DenseMatrix::zeros(nv, nv);
    for i in 0..n {
        p[(i, i)] = 2.0 * d[i];
    }
    for i in n..nv {
        p[(i, i)] = 2.0;
    }
    let mut q = vec![0.0; nv];
    for i in 0..n {
        q[i] = -mu[i] / gamma;
    }

    let m = k + 1 + n;
    let mut a = DenseMatrix::zeros(m, nv);
    let (mut l, mut u) = (vec![0.0; m], vec![0.0; m]);
    // y = Fᵀx
    for i in 0..k {
        a[(i, n + i)] = 1.0;
        for j in 0..n {
            a[(i, j)] = -f[(j, i)];
        }
    }
    // 1ᵀx = 1
    for j in 0..n {
        a[(k, j)] = 1.0;
    }
    l[k] = 1.0;
    u[k] = 1.0;
    // 0 ≤ x ≤ 1
    for j in 0..n {
        a[(k + 1 + j, j)] = 1.0;
        u[k + 1 + j] = 1.0;
    }
    Parts { p, q, a, l, u }
}

fn lasso_parts(n: usize, seed: u64) -> Parts {
    let st = |tag: &str| Stream::new("lasso", n, seed, tag);
    let md = 10 * n;
    let ad = masked_normal(md, n, 0.15, &mut st("Ad"), &mut st("Ad_mask"));
    let mut truth = vec![0.0; n];
    let mut tv = st("truth");
    let mut tm = st("truth_mask");
    let scale = 1.0 / (n as f64).sqrt();
    for v in truth.iter_mut() {
        let x = tv.normal() * scale;
        if tm.bernoulli(0.1) {
            *v = x;
        }
    }
    let noise = st("noise").normals(md);
    let b: Vec<f64> = ad
        .mul_vec(&truth)
        .iter()
        .zip(&noise)
        .map(|(a, e)| a + e)
        .collect();
    let lambda = 0.2 * inf_norm(&ad.tr_mul_vec(&b));

    // variables [x (n); y (md); t (n)]
    let nv = n + md + n;
    let mut p = DenseMatrix::zeros(nv, nv);
    for i in n..n + md {
        p[(i, i)] = 2.0;
    }
    let mut q = vec![0.0; nv];
    for v in q.iter_mut().skip(n + md) {
        *v = lambda;
    }
    let m = md + 2 * n;
    let mut a = DenseMatrix::zeros(m, nv);
    let (mut l, mut u) = (vec![0.0; m], vec![0.0; m]);
    // y − A_d x = −b
    for i in 0..md {
        for j in 0..n {
            a[(i, j)] = -ad[(i, j)];
        }
        a[(i, n + i)] = 1.0;
        l[i] = -b[i];
        u[i] = -b[i];
    }
    // x − t ≤ 0 and x + t ≥ 0
    for j in 0..n {
        let r = md + j;
        a[(r, j)] = 1.0;
        a[(r, n + md + j)] = -1.0;
        l[r] = f64::NEG_INFINITY;
        u[r] = 0.0;
        let r = md + n + j;
        a[(r, j)] = 1.0;
        a[(r, n + md + j)] = 1.0;
        l[r] = 0.0;
        u[r] = f64::INFINITY;
    }
    Parts { p, q, a, l, u }
}

fn svm_parts(n: usize, seed: u64) -> Parts {
    let st = |tag: &str| Stream::new("svm", n, seed, tag);
    let md = 10 * n;
    let half = md / 2;
    let mut raw = masked_normal(md, n, 0.15, &mut st("Ad"), &mut st("Ad_mask"));
    let sq = (n as f64).sqrt();
    let shift = 1.0 / n as f64;
    let labels: Vec<f64> = (0..md).map(|i| if i < half { 1.0 } else { -1.0 }).collect();
    for i in 0..md {
        for v in raw.row_mut(i) {
            if *v != 0.0 {
                *v = *v / sq + labels[i] * shift;
            }
        }
    }
    let lambda = 1.0;

    // variables [x (n); t (md)]
    let nv = n + md;
    let mut p = DenseMatrix::zeros(nv, nv);
    for i in 0..n {
        p[(i, i)] = 2.0;
    }
    let mut q = vec![0.0; nv];
    for v in q.iter_mut().skip(n) {
        *v = lambda;
    }
    let m = 2 * md;
    let mut a = DenseMatrix::zeros(m, nv);
    let (mut l, u) = (vec![0.0; m], vec![f64::INFINITY; m]);
    // t_i − b_i a_iᵀx ≥ 1
    for i in 0..md {
        for j in 0..n {
            a[(i, j)] = -labels[i] * raw[(i, j)];
        }
        a[(i, n + i)] = 1.0;
        l[i] = 1.0;
    }
    // t ≥ 0
    for i in 0..md {
        a[(md + i, n + i)] = 1.0;
    }
    Parts { p, q, a, l, u }
}

/// Linear system with stage and terminal costs.
struct LinearSystem {
    ad: DenseMatrix,
    bd: DenseMatrix,
    q_diag: Vec<f64>,
    r_diag: Vec<f64>,
    q_terminal: DenseMatrix,
    x_bound: Vec<f64>,
    u_bound: Vec<f64>,
}

/// Terminal cost from the discrete Riccati recursion, started at `Q`.
fn riccati_terminal(
    ad: &DenseMatrix,
    bd: &DenseMatrix,
    q_diag: &[f64],
    r_diag: &[f64],
) -> Result<DenseMatrix> {
    let q = DenseMatrix::diag(q_diag);
    let at = ad.transpose();
    let bt = bd.transpose();
    let mut p = q.clone();
    for _ in 0..1000 {
        let pa = p.matmul(ad)?;
        let pb = p.matmul(bd)?;
        let mut s = bt.matmul(&pb)?;
        for (i, r) in r_diag.iter().enumerate() {
            s[(i, i)] += r;
        }
        let f = ldlt_factor(&s)?;
        // K = S⁻¹ Bᵀ P A, column by column.
        let btpa = bt.matmul(&pa)?;
        let nx = ad.rows();
        let mut k = DenseMatrix::zeros(bd.cols(), nx);
        for c in 0..nx {
            let col: Vec<f64> = (0..bd.cols()).map(|r| btpa[(r, c)]).collect();
            let sol = f.solve(&col)?;
            for (r, v) in sol.into_iter().enumerate() {
                k[(r, c)] = v;
            }
        }
        let atpa = at.matmul(&pa)?;
        let atpb = at.matmul(&pb)?;
        let corr = atpb.matmul(&k)?;
        let mut next = q.clone();
        for i in 0..nx {
            for j in 0..nx {
                next[(i, j)] += atpa[(i, j)] - corr[(i, j)];
            }
        }
        let next = symmetrize(next);
        if next.entries().iter().any(|v| !v.is_finite()) {
            return Ok(q);
        }
        let diff = next
            .entries()
            .iter()
            .zip(p.entries())
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
        let scale = inf_norm(next.entries()).max(1.0);
        p = next;
        if diff <= 1e-10 * scale {
            break;
        }
    }
    Ok(p)
}

fn control_system(nx: usize, seed: u64) -> Result<LinearSystem> {
    let st = |tag: &str| Stream::new("control", nx, seed, tag);
    let nu = nx.div_ceil(2);
    let mut ad = DenseMatrix::identity(nx);
    let mut g = st("A");
    let scale = 0.1 / (nx as f64).sqrt();
    for i in 0..nx {
        for j in 0..nx {
            ad[(i, j)] += scale * g.normal();
        }
    }
    let mut bd = DenseMatrix::zeros(nx, nu);
    let mut gb = st("B");
    let bs = 1.0 / (nx as f64).sqrt();
    for i in 0..nx {
        for v in bd.row_mut(i) {
            *v = bs * gb.normal();
        }
    }
    let q_diag: Vec<f64> = st("Q").uniforms(nx).into_iter().map(|v| 10.0 * v).collect();
    let r_diag = vec![0.1; nu];
    let q_terminal = riccati_terminal(&ad, &bd, &q_diag, &r_diag)?;
    let x_bound = st("x_bound")
        .uniforms(nx)
        .into_iter()
        .map(|v| 5.0 * (1.0 + v))
        .collect();
    let u_bound = st("u_bound")
        .uniforms(nu)
        .into_iter()
        .map(|v| 0.1 + 0.4 * v)
        .collect();
    Ok(LinearSystem {
        ad,
        bd,
        q_diag,
        r_diag,
        q_terminal,
        x_bound,
        u_bound,
    })
}

/// Free response `x_t = Aᵗ x₀` for `t = 0..=T`.
fn free_response(ad: &DenseMatrix, x0: &[f64]) -> Vec<Vec<f64>> {
    let mut traj = vec![x0.to_vec()];
    for _ in 0..HORIZON {
        let next = ad.mul_vec(traj.last().expect("nonempty"));
        traj.push(next);
    }
    traj
}

/// Shrinks `x₀` until the zero-input trajectory stays inside 90% of the box.
fn feasible_x0(sys: &LinearSystem, mut x0: Vec<f64>) -> Vec<f64> {
    let traj = free_response(&sys.ad, &x0);
    let worst = traj
        .iter()
        .flat_map(|x| x.iter().zip(&sys.x_bound).map(|(v, b)| v.abs() / b))
        .fold(0.0_f64, f64::max);
    if worst > 0.9 {
        let s = 0.9 / worst;
        x0.iter_mut().for_each(|v| *v *= s);
    }
    x0
}

fn control_parts(nx: usize, seed: u64) -> Result<Parts> {
    let sys = control_system(nx, seed)?;
    let nu = sys.bd.cols();
    let x0: Vec<f64> = Stream::new("control", nx, seed, "x0")
        .uniforms(nx)
        .into_iter()
        .zip(&sys.x_bound)
        .map(|(v, b)| 0.5 * b * (2.0 * v - 1.0))
        .collect();
    let x0 = feasible_x0(&sys, x0);
    let t = HORIZON;

    // x_t = Φ_t x₀ + Σ_j Ψ_{t,j} u_j, t = 1..T
    let mut powers = vec![DenseMatrix::identity(nx)];
    for k in 1..=t {
        let next = sys.ad.matmul(&powers[k - 1])?;
        powers.push(next);
    }
    let mut psi = DenseMatrix::zeros(t * nx, t * nu);
    for step in 1..=t {
        for j in 0..step {
            let blk = powers[step - 1 - j].matmul(&sys.bd)?;
            for r in 0..nx {
                for c in 0..nu {
                    psi[((step - 1) * nx + r, j * nu + c)] = blk[(r, c)];
                }
            }
        }
    }
    let free = free_response(&sys.ad, &x0);

    // Q̄ = blkdiag(Q, …, Q, Q_T) over x_1..x_T
    let mut qbar = DenseMatrix::zeros(t * nx, t * nx);
    for step in 1..=t {
        let off = (step - 1) * nx;
        for r in 0..nx {
            if step < t {
                qbar[(off + r, off + r)] = sys.q_diag[r];
            } else {
                for c in 0..nx {
                    qbar[(off + r, off + c)] = sys.q_terminal[(r, c)];
                }
            }
        }
    }
    let qpsi = qbar.matmul(&psi)?;
    let mut p = psi.transpose().matmul(&qpsi)?;
    for i in 0..t * nu {
        p[(i, i)] += sys.r_diag[i % nu];
    }
    // The cost is divided by its largest curvature so that ρ = 0.1 is on the
    // scale of P; the minimizer is unchanged.
    let scale = 1.0 / (0..t * nu).map(|i| p[(i, i)]).fold(0.0, f64::max);
    let p = DenseMatrix::from_row_major(
        t * nu,
        t * nu,
        p.entries().iter().map(|v| 2.0 * scale * v).collect(),
    )?;
    let free_stack: Vec<f64> = free[1..].iter().flatten().copied().collect();
    let q: Vec<f64> = qpsi
        .tr_mul_vec(&free_stack)
        .into_iter()
        .map(|v| 2.0 * scale * v)
        .collect();

    let m = t * nx + t * nu;
    let n = t * nu;
    let mut a = DenseMatrix::zeros(m, n);
    let (mut l, mut u) = (vec![0.0; m], vec![0.0; m]);
    for r in 0..t * nx {
        a.row_mut(r).copy_from_slice(psi.row(r));
        let b = sys.x_bound[r % nx];
        l[r] = -b - free_stack[r];
        u[r] = b - free_stack[r];
    }
    for r in 0..t * nu {
        a[(t * nx + r, r)] = 1.0;
        let b = sys.u_bound[r % nu];
        l[t * nx + r] = -b;
        u[t * nx + r] = b;
    }
    Ok(Parts { p, q, a, l, u })
}

fn mpc_system(nx: usize) -> Result<LinearSystem> {
    // Shared by every instance: keyed without the instance seed.
    let st = |tag: &str| Stream::new("mpc", nx, 0, tag);
    let nu = nx.div_ceil(2);
    let mut g = DenseMatrix::zeros(nx, nx);
    let mut ga = st("A");
    for i in 0..nx {
        for v in g.row_mut(i) {
            *v = ga.normal();
        }
    }
    let row_norm = (0..nx)
        .map(|i| g.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    // ‖A‖∞ ≤ 0.95 keeps every zero-input trajectory inside a cube.
    let mut ad = DenseMatrix::identity(nx);
    for i in 0..nx {
        for j in 0..nx {
            ad[(i, j)] = if i == j { 0.5 } else { 0.0 } + 0.45 * g[(i, j)] / row_norm;
        }
    }
    let mut bd = DenseMatrix::zeros(nx, nu);
    let mut gb = st("B");
    let bs = 1.0 / (nx as f64).sqrt();
    for i in 0..nx {
        for v in bd.row_mut(i) {
            *v = bs * gb.normal();
        }
    }
    let q_diag: Vec<f64> = st("Q").uniforms(nx).into_iter().map(|v| 10.0 * v).collect();
    let r_diag = vec![0.1; nu];
    let q_terminal = riccati_terminal(&ad, &bd, &q_diag, &r_diag)?;
    Ok(LinearSystem {
        ad,
        bd,
        q_diag,
        r_diag,
        q_terminal,
        x_bound: vec![5.0; nx],
        u_bound: vec![0.5; nu],
    })
}

fn mpc_parts(nx: usize, seed: u64) -> Result<Parts> {
    let sys = mpc_system(nx)?;
    let nu = sys.bd.cols();
    let t = HORIZON;
    let x0: Vec<f64> = Stream::new("mpc", nx, seed, "x0")
        .uniforms(nx)
        .into_iter()
        .zip(&sys.x_bound)
        .map(|(v, b)| b * (2.0 * v - 1.0))
        .collect();

    // variables [x_0, …, x_T, u_0, …, u_{T−1}]
    let xoff = |k: usize| k * nx;
    let uoff = |k: usize| (t + 1) * nx + k * nu;
    let n = t * (nx + nu) + nx;
    let mut p = DenseMatrix::zeros(n, n);
    for k in 0..t {
        for i in 0..nx {
            p[(xoff(k) + i, xoff(k) + i)] = 2.0 * sys.q_diag[i];
        }
        for i in 0..nu {
            p[(uoff(k) + i, uoff(k) + i)] = 2.0 * sys.r_diag[i];
        }
    }
    for i in 0..nx {
        for j in 0..nx {
            p[(xoff(t) + i, xoff(t) + j)] = 2.0 * sys.q_terminal[(i, j)];
        }
    }
    let q = vec![0.0; n];

    let m = nx + t * nx + t * nx + t * nu;
    let mut a = DenseMatrix::zeros(m, n);
    let (mut l, mut u) = (vec![0.0; m], vec![0.0; m]);
    // x_0 = x₀
    for i in 0..nx {
        a[(i, xoff(0) + i)] = 1.0;
        l[i] = x0[i];
        u[i] = x0[i];
    }
    // A x_k + B u_k − x_{k+1} = 0
    for k in 0..t {
        for i in 0..nx {
            let r = nx + k * nx + i;
            for j in 0..nx {
                a[(r, xoff(k) + j)] = sys.ad[(i, j)];
            }
            for j in 0..nu {
                a[(r, uoff(k) + j)] = sys.bd[(i, j)];
            }
            a[(r, xoff(k + 1) + i)] = -1.0;
        }
    }
    // state box on x_1..x_T, input box on u
    let sbase = nx + t * nx;
    for k in 0..t {
        for i in 0..nx {
            let r = sbase + k * nx + i;
            a[(r, xoff(k + 1) + i)] = 1.0;
            l[r] = -sys.x_bound[i];
            u[r] = sys.x_bound[i];
        }
    }
    let ubase = sbase + t * nx;
    for k in 0..t {
        for i in 0..nu {
            let r = ubase + k * nu + i;
            a[(r, uoff(k) + i)] = 1.0;
            l[r] = -sys.u_bound[i];
            u[r] = sys.u_bound[i];
        }
    }
    Ok(Parts { p, q, a, l, u })
}

/// High-accuracy primal-dual pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub x_star: Vec<f64>,
    pub lambda_star: Vec<f64>,
    pub objective: f64,
    pub kkt_error: f64,
}

/// Largest allowed KKT error of a reference solution.
pub const REFERENCE_KKT_TOL: f64 = 1e-8;

impl ReferenceSolution {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    /// `Ax*`, the constraint-space copy of the solution.
    pub fn z_star(&self, prob: &QpProblem) -> Vec<f64> {
        prob.a.mul_vec(&self.x_star)
    }
}

/// KKT error `max(r_prim, r_dual, complementarity)` of `(x, λ)` with `z = Π(Ax)`.
///
/// Complementarity is sign-aware: a positive multiplier pairs with the upper
/// bound, a negative one with the lower bound.
pub fn kkt_error(prob: &QpProblem, x: &[f64], lambda: &[f64]) -> Result<f64> {
    let ax = prob.a.mul_vec(x);
    let z: Vec<f64> = ax
        .iter()
        .zip(prob.l.iter().zip(&prob.u))
        .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
        .collect();
    let res = osqp_residuals(prob, x, &z, lambda)?;
    let mut comp = 0.0_f64;
    for i in 0..prob.m() {
        let li = lambda[i];
        let gap = if li > 0.0 {
            prob.u[i] - z[i]
        } else if li < 0.0 {
            z[i] - prob.l[i]
        } else {
            0.0
        };
        comp = comp.max(li.abs().min(gap));
    }
    Ok(res.r_prim_inf.max(res.r_dual_inf).max(comp))
}

pub fn reference_config() -> SolverConfig {
    SolverConfig {
        eps_abs: 1e-9,
        eps_rel: 1e-9,
        adaptive_rho: true,
        max_iter: 200_000,
        ..SolverConfig::default()
    }
}

/// Solves to tight tolerance, then refines with an active-set polish.
pub fn reference_solution(prob: &QpProblem) -> Result<ReferenceSolution> {
    let report = solve(prob, &reference_config(), &FixedRelaxation(1.6))?;
    let mut x = report.x;
    let mut lambda = report.y;
    let mut err = kkt_error(prob, &x, &lambda)?;
    if let Some((px, plam)) = polish(prob, &report.z, &x, &lambda)? {
        let perr = kkt_error(prob, &px, &plam)?;
        if perr < err {
            x = px;
            lambda = plam;
            err = perr;
        }
    }
    if !(err <= REFERENCE_KKT_TOL) {
        let reason = match report.status {
            SolveStatus::MaxIter => format!("max_iter reached, KKT error {err:e}"),
            SolveStatus::Solved => format!("KKT error {err:e} above {REFERENCE_KKT_TOL:e}"),
        };
        log::warn!("reference solve of {} failed: {reason}", prob.name);
        return Err(Error::ReferenceFailure {
            name: prob.name.clone(),
            reason,
        });
    }
    Ok(ReferenceSolution {
        objective: prob.objective(&x)?,
        x_star: x,
        lambda_star: lambda,
        kkt_error: err,
    })
}

/// Guesses the active set from `(z, y)` and solves the equality-constrained
/// KKT system on it, with a small regularization removed by refinement.
fn polish(
    prob: &QpProblem,
    z: &[f64],
    x: &[f64],
    y: &[f64],
) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let n = prob.n();
    let kinds = prob.kinds()?;
    let mut active = Vec::new();
    let mut target = Vec::new();
    for i in 0..prob.m() {
        if kinds[i] == ConstraintKind::Equality || z[i] - prob.l[i] < -y[i] {
            active.push(i);
            target.push(prob.l[i]);
        } else if prob.u[i] - z[i] < y[i] {
            active.push(i);
            target.push(prob.u[i]);
        }
    }
    let k = active.len();
    let mut a_act = DenseMatrix::zeros(k, n);
    for (r, &i) in active.iter().enumerate() {
        a_act.row_mut(r).copy_from_slice(prob.a.row(i));
    }
    let delta = 1e-9;
    let kkt = match assemble_kkt(&prob.p, &a_act, delta, &vec![1.0 / delta; k])
        .and_then(|m| ldlt_factor(&m))
    {
        Ok(f) => f,
        Err(_) => return Ok(None),
    };
    let mut rhs: Vec<f64> = prob.q.iter().map(|v| -v).collect();
    rhs.extend_from_slice(&target);

    // Iterative refinement against the unregularized system.
    let mut sol: Vec<f64> = x
        .iter()
        .copied()
        .chain(active.iter().map(|&i| y[i]))
        .collect();
    for _ in 0..8 {
        let (xs, ys) = sol.split_at(n);
        let mut resid = rhs.clone();
        let px = prob.p.mul_vec(xs);
        let aty = a_act.tr_mul_vec(ys);
        let ax = a_act.mul_vec(xs);
        for j in 0..n {
            resid[j] -= px[j] + aty[j];
        }
        for r in 0..k {
            resid[n + r] -= ax[r];
        }
        let step = kkt.solve(&resid)?;
        sol.iter_mut().zip(&step).for_each(|(s, d)| *s += d);
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return Ok(None);
    }
    let px = sol[..n].to_vec();
    let mut lam = vec![0.0; prob.m()];
    for (r, &i) in active.iter().enumerate() {
        lam[i] = sol[n + r];
    }
    Ok(Some((px, lam)))
}

/// One instance referenced from a manifest. Without explicit paths the
/// instance is regenerated from its spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEntry {
    #[serde(flatten)]
    pub spec: FamilySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
}

impl InstanceEntry {
    pub fn generated(spec: FamilySpec) -> Self {
        Self {
            spec,
            problem: None,
            reference: None,
        }
    }

    /// Loads or generates the problem. Relative paths resolve against `base`.
    pub fn problem(&self, base: &Path) -> Result<QpProblem> {
        match &self.problem {
            Some(p) => QpProblem::load(&base.join(p)),
            None => generate(&self.spec),
        }
    }

    /// Loads the stored reference or computes it.
    pub fn reference(&self, base: &Path, prob: &QpProblem) -> Result<ReferenceSolution> {
        match &self.reference {
            Some(p) => ReferenceSolution::load(&base.join(p)),
            None => reference_solution(prob),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub instances: Vec<InstanceEntry>,
}

impl Manifest {
    /// Train/val/test specs with consecutive, disjoint seed blocks starting at
    /// `seed`. Test instances cycle over `test_sizes`.
    pub fn build(
        family: Family,
        train: (usize, usize),
        val: usize,
        test_sizes: &[usize],
        test_per_size: usize,
        seed: u64,
    ) -> Self {
        let (train_size, n_train) = train;
        let mut next = seed;
        let mut instances = Vec::new();
        let mut take = |split, size, count: usize, instances: &mut Vec<InstanceEntry>| {
            for _ in 0..count {
                instances.push(InstanceEntry::generated(FamilySpec::new(
                    family, size, next, split,
                )));
                next += 1;
            }
        };
        take(Split::Train, train_size, n_train, &mut instances);
        take(Split::Val, train_size, val, &mut instances);
        for &s in test_sizes {
            take(Split::Test, s, test_per_size, &mut instances);
        }
        Self { seed, instances }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &InstanceEntry> {
        self.instances.iter().filter(move |e| e.spec.split == split)
    }

    /// Every spec is valid and no seed is shared between splits of a family.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<(Family, u64), BTreeSet<Split>> = BTreeMap::new();
        for e in &self.instances {
            e.spec.validate()?;
            seen.entry((e.spec.family, e.spec.seed))
                .or_default()
                .insert(e.spec.split);
        }
        if let Some(((family, seed), splits)) = seen.iter().find(|(_, s)| s.len() > 1) {
            return Err(Error::Input(format!(
                "seed {seed} of {family} appears in splits {splits:?}"
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Problems and references under `root/family/size/seed/`.
pub struct InstanceStore {
    root: PathBuf,
}

impl InstanceStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn relative_dir(spec: &FamilySpec) -> PathBuf {
        PathBuf::from(spec.family.name())
            .join(spec.size.to_string())
            .join(spec.seed.to_string())
    }

    /// Generates, solves and writes one instance; returns its manifest entry
    /// with paths relative to the store root.
    pub fn materialize(&self, spec: &FamilySpec) -> Result<InstanceEntry> {
        let rel = Self::relative_dir(spec);
        std::fs::create_dir_all(self.root.join(&rel))?;
        let prob = generate(spec)?;
        let reference = reference_solution(&prob)?;
        let problem_path = rel.join("problem.json");
        let reference_path = rel.join("reference.json");
        prob.save(&self.root.join(&problem_path))?;
        reference.save(&self.root.join(&reference_path))?;
        Ok(InstanceEntry {
            spec: *spec,
            problem: Some(problem_path),
            reference: Some(reference_path),
        })
    }
}
