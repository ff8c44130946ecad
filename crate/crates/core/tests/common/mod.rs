//! Independent oracles built on nalgebra, plus small test policies.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use relaxqp::{
    Iterate, PolicyInput, QpProblem, RelaxationPolicy, RelaxationUpdate, Result, SolveObserver,
    Step,
};

pub fn to_na(prob: &QpProblem) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (prob.n(), prob.m());
    let p = DMatrix::from_fn(n, n, |i, j| prob.p[(i, j)]);
    let a = DMatrix::from_fn(m, n, |i, j| prob.a[(i, j)]);
    (p, a)
}

/// Exact minimizer by enumerating every lower/upper/inactive pattern of the
/// constraints. Returns `(x, y)` with `y > 0` on upper-active rows.
pub fn active_set_solution(prob: &QpProblem) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = (prob.n(), prob.m());
    let (p, a) = to_na(prob);
    let q = DVector::from_column_slice(&prob.q);
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for code in 0..3usize.pow(m as u32) {
        // 0 inactive, 1 at lower, 2 at upper
        let pattern: Vec<usize> = (0..m).map(|i| code / 3usize.pow(i as u32) % 3).collect();
        let active: Vec<usize> = (0..m).filter(|&i| pattern[i] != 0).collect();
        let k = active.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&q));
        for (r, &i) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = a[(i, j)];
                kkt[(j, n + r)] = a[(i, j)];
            }
            rhs[n + r] = if pattern[i] == 1 {
                prob.l[i]
            } else {
                prob.u[i]
            };
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let x = sol.rows(0, n).into_owned();
        let ax = &a * &x;
        let feasible = (0..m).all(|i| ax[i] >= prob.l[i] - 1e-10 && ax[i] <= prob.u[i] + 1e-10);
        let mut y = vec![0.0; m];
        let mut signs_ok = true;
        for (r, &i) in active.iter().enumerate() {
            y[i] = sol[n + r];
            signs_ok &= if pattern[i] == 1 {
                y[i] <= 1e-12
            } else {
                y[i] >= -1e-12
            };
        }
        if !(feasible && signs_ok) {
            continue;
        }
        let obj = 0.5 * x.dot(&(&p * &x)) + q.dot(&x);
        if best.as_ref().is_none_or(|(b, _, _)| obj < *b) {
            best = Some((obj, x.as_slice().to_vec(), y));
        }
    }
    let (_, x, y) = best.expect("a feasible KKT point exists");
    (x, y)
}

/// Scalar relaxed ADMM in OSQP form, transcribed directly: one dense LU of
/// the reduced KKT matrix, `ρ` on inequality rows and `10³ρ` on equality rows.
pub fn scalar_relaxed_admm(
    prob: &QpProblem,
    rho: f64,
    sigma: f64,
    alpha: f64,
    iters: usize,
) -> Vec<Iterate> {
    let (n, m) = (prob.n(), prob.m());
    let (p, a) = to_na(prob);
    let rho_v: Vec<f64> = (0..m)
        .map(|i| {
            if prob.l[i] == prob.u[i] {
                1e3 * rho
            } else {
                rho
            }
        })
        .collect();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n))
        .copy_from(&(p + DMatrix::identity(n, n) * sigma));
    for i in 0..m {
        for j in 0..n {
            kkt[(n + i, j)] = a[(i, j)];
            kkt[(j, n + i)] = a[(i, j)];
        }
        kkt[(n + i, n + i)] = -1.0 / rho_v[i];
    }
    let lu = kkt.lu();
    let (mut x, mut z, mut y) = (vec![0.0; n], vec![0.0; m], vec![0.0; m]);
    let mut out = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut rhs = DVector::zeros(n + m);
        for j in 0..n {
            rhs[j] = sigma * x[j] - prob.q[j];
        }
        for i in 0..m {
            rhs[n + i] = z[i] - y[i] / rho_v[i];
        }
        let sol = lu.solve(&rhs).expect("nonsingular KKT");
        let x_tilde: Vec<f64> = (0..n).map(|j| sol[j]).collect();
        let z_tilde: Vec<f64> = (0..m)
            .map(|i| z[i] + (sol[n + i] - y[i]) / rho_v[i])
            .collect();
        for j in 0..n {
            x[j] = alpha * x_tilde[j] + (1.0 - alpha) * x[j];
        }
        for i in 0..m {
            let w = alpha * z_tilde[i] + (1.0 - alpha) * z[i];
            let z_new = (w + y[i] / rho_v[i]).clamp(prob.l[i], prob.u[i]);
            y[i] += rho_v[i] * (w - z_new);
            z[i] = z_new;
        }
        out.push(Iterate {
            x: x.clone(),
            z: z.clone(),
            y: y.clone(),
            x_tilde,
            z_tilde,
        });
    }
    out
}

/// Deterministic pseudo-random relaxation in `[lo, hi]`, different per row
/// and per query.
pub struct Oscillating {
    pub lo: f64,
    pub hi: f64,
}

fn hash01(a: usize, b: usize) -> f64 {
    let v = ((a as f64) * 12.9898 + (b as f64) * 78.233).sin() * 43758.5453;
    v - v.floor()
}

impl RelaxationPolicy for Oscillating {
    fn relaxation(&self, input: &PolicyInput<'_>) -> Result<RelaxationUpdate> {
        let k = input.state.iter;
        let m = input.prob.m();
        let span = self.hi - self.lo;
        Ok(RelaxationUpdate {
            gamma: (0..m)
                .map(|i| self.lo + span * hash01(i + 1, k + 1))
                .collect(),
            alpha_x: self.lo + span * hash01(0, k + 1),
        })
    }

    fn label(&self) -> String {
        "oscillating".into()
    }
}

/// Iterates and relaxation of every step.
#[derive(Default)]
pub struct StepLog {
    pub iterates: Vec<Iterate>,
    pub gamma: Vec<Vec<f64>>,
    pub alpha_x: Vec<f64>,
}

impl SolveObserver for StepLog {
    fn on_step(&mut self, step: &Step<'_>) {
        self.iterates.push(step.state.iterate.clone());
        self.gamma.push(step.gamma_used.to_vec());
        self.alpha_x.push(step.alpha_x_used);
    }

    fn wants_steps(&self) -> bool {
        true
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
