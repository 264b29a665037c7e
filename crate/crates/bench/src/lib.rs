//! Shared fixtures for the benchmarks.

use lysep::sampling::train_test_sets;
use lysep::{init_params, manufactured_problem, BallMapping, Dataset, NetworkParams, PdeProblem};

/// Problem, training data and seeded initial parameters at width `m`.
pub fn fixture(name: &str, m: usize, n: usize) -> (PdeProblem, Dataset, NetworkParams) {
    let prob = manufactured_problem(name).expect("known problem");
    let (train, _) = train_test_sets(&prob, n, 1, BallMapping::default()).expect("sampling");
    let ds = Dataset::from_sampled(&prob, &train).expect("dataset");
    let p = init_params(m, prob.input_dim(), 0);
    (prob, ds, p)
}
