mod common;

use common::{active_set_solution, max_abs_diff, scalar_relaxed_admm, StepLog};
use relaxqp::suite::{random_qp, reference_solution};
use relaxqp::{solve, solve_observed, FixedRelaxation, SolverConfig};

fn no_termination() -> SolverConfig {
    SolverConfig {
        eps_abs: f64::MIN_POSITIVE,
        eps_rel: 0.0,
        ..SolverConfig::default()
    }
}

#[test]
fn reference_matches_active_set_enumeration() {
    for (n, m, seed) in [(8, 5, 0), (6, 4, 1), (5, 6, 2)] {
        let prob = random_qp(n, m, seed).unwrap();
        let (x, y) = active_set_solution(&prob);
        let r = reference_solution(&prob).unwrap();
        assert!(
            max_abs_diff(&x, &r.x_star) < 1e-6,
            "x mismatch on seed {seed}"
        );
        assert!(
            max_abs_diff(&y, &r.lambda_star) < 1e-6,
            "y mismatch on seed {seed}"
        );
        assert!((prob.objective(&x).unwrap() - r.objective).abs() < 1e-6);
    }
}

#[test]
fn solver_tolerance_solution_is_near_enumerated_optimum() {
    let prob = random_qp(8, 5, 0).unwrap();
    let (x, _) = active_set_solution(&prob);
    let cfg = SolverConfig {
        eps_abs: 1e-8,
        eps_rel: 1e-8,
        adaptive_rho: true,
        ..SolverConfig::default()
    };
    let rep = solve(&prob, &cfg, &FixedRelaxation(1.6)).unwrap();
    assert!(max_abs_diff(&x, &rep.x) < 1e-5);
}

#[test]
fn constant_relaxation_matches_scalar_transcription() {
    for (seed, alpha) in [(0, 1.6), (1, 1.25), (2, 1.95)] {
        let prob = random_qp(12, 9, seed).unwrap();
        let cfg = SolverConfig {
            alpha0: alpha,
            max_iter: 100,
            ..no_termination()
        };
        let mut log = StepLog::default();
        solve_observed(&prob, &cfg, &FixedRelaxation(alpha), &mut log).unwrap();
        let oracle = scalar_relaxed_admm(&prob, cfg.rho0, cfg.sigma, alpha, 100);
        assert_eq!(log.iterates.len(), 100);
        for (a, b) in log.iterates.iter().zip(&oracle) {
            for (u, v) in [(&a.x, &b.x), (&a.z, &b.z), (&a.y, &b.y)] {
                assert!(max_abs_diff(u, v) <= 1e-12 * (1.0 + relaxqp::linalg::inf_norm(v)));
            }
        }
    }
}
