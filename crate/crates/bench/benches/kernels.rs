use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use relaxqp::linalg::{assemble_kkt, ldlt_factor};
use relaxqp::policy::{Variant, ROW_DIM};
use relaxqp::{solve, FixedRelaxation, SolverConfig, SolverState};
use relaxqp_bench::{problem, untrained, SIZES};
use std::hint::black_box;

fn kkt_factor(c: &mut Criterion) {
    let mut g = c.benchmark_group("ldlt_factor");
    for n in SIZES {
        let prob = problem(n);
        let kkt = assemble_kkt(&prob.p, &prob.a, 1e-6, &vec![0.1; prob.m()]).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &kkt, |b, k| {
            b.iter(|| ldlt_factor(black_box(k)).unwrap())
        });
    }
    g.finish();
}

fn kkt_backsolve(c: &mut Criterion) {
    let mut g = c.benchmark_group("ldlt_solve");
    for n in SIZES {
        let prob = problem(n);
        let kkt = assemble_kkt(&prob.p, &prob.a, 1e-6, &vec![0.1; prob.m()]).unwrap();
        let f = ldlt_factor(&kkt).unwrap();
        let rhs: Vec<f64> = (0..kkt.rows()).map(|i| (i as f64).sin()).collect();
        g.bench_with_input(BenchmarkId::from_parameter(n), &rhs, |b, r| {
            b.iter(|| f.solve(black_box(r)).unwrap())
        });
    }
    g.finish();
}

fn iteration(c: &mut Criterion) {
    let mut g = c.benchmark_group("iterate_once");
    let cfg = SolverConfig::default();
    for n in SIZES {
        let prob = problem(n);
        let mut state = SolverState::new(&prob, &cfg).unwrap();
        g.bench_function(BenchmarkId::from_parameter(n), |b| {
            b.iter(|| state.iterate_once(&prob, &cfg).unwrap())
        });
    }
    g.finish();
}

fn full_solve(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve");
    g.sample_size(20);
    for adaptive in [false, true] {
        let cfg = SolverConfig {
            adaptive_rho: adaptive,
            ..SolverConfig::default()
        };
        let prob = problem(50);
        let label = if adaptive { "adaptive" } else { "fixed" };
        g.bench_function(BenchmarkId::new("random_qp_50", label), |b| {
            b.iter(|| solve(black_box(&prob), &cfg, &FixedRelaxation(1.6)).unwrap())
        });
    }
    g.finish();
}

fn policy_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("policy");
    let scalar = untrained(Variant::Scalar);
    let input = vec![0.1; Variant::Scalar.input_dim()];
    g.bench_function("scalar_forward", |b| {
        b.iter(|| scalar.forward(black_box(&input)).unwrap())
    });

    let vector = untrained(Variant::Vector);
    let global = vec![0.1; Variant::Vector.input_dim() - ROW_DIM];
    for m in [25, 500] {
        let rows: Vec<[f64; ROW_DIM]> = (0..m).map(|i| [i as f64 * 0.01; ROW_DIM]).collect();
        g.bench_with_input(BenchmarkId::new("vector_step", m), &rows, |b, r| {
            b.iter(|| vector.step_vector(&global, black_box(r)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(
    benches,
    kkt_factor,
    kkt_backsolve,
    iteration,
    full_solve,
    policy_forward
);
criterion_main!(benches);
