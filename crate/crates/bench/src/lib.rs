//! Shared fixtures for the criterion benches.

use relaxqp::policy::{NormStats, PolicyCheckpoint, Variant};
use relaxqp::suite::random_qp;
use relaxqp::QpProblem;

/// Sizes swept by every size-parametrized bench.
pub const SIZES: [usize; 3] = [20, 50, 150];

/// Random QP with `m = n/2` constraints, as in the training family.
pub fn problem(n: usize) -> QpProblem {
    random_qp(n, n.div_ceil(2), 0).expect("valid size")
}

pub fn untrained(variant: Variant) -> PolicyCheckpoint {
    PolicyCheckpoint::init(variant, NormStats::identity(variant.input_dim()), 0)
        .expect("valid init")
}
