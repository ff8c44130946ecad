//! Quadratic programming with matrix-valued relaxed ADMM.
//!
//! The solver runs the OSQP splitting with a diagonal relaxation matrix `Γ`
//! (one entry per constraint row) that a policy may change every few
//! iterations without touching the KKT factorization. Around it sit a
//! numerical checker for the Douglas–Rachford view of the iteration, MLP
//! relaxation policies, a gradient-free trainer and generators for the
//! benchmark problem families.

// `!(a > b)` is how NaN inputs get rejected; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod engine;
pub mod error;
pub mod linalg;
pub mod policy;
pub mod qp;
pub mod rng;
pub mod suite;
pub mod trainer;
pub mod verifier;

pub use engine::{
    solve, solve_observed, DiagParams, FixedRelaxation, Iterate, PolicyInput, RelaxationPolicy,
    RelaxationUpdate, SolveObserver, SolveReport, SolveStatus, SolverConfig, SolverState, Step,
};
pub use error::{Error, Result};
pub use linalg::DenseMatrix;
pub use qp::{ConstraintKind, QpProblem, Residuals};
