#![allow(dead_code)]

use lysep::lysep::AuxState;
use lysep::network::NetworkParams;
use lysep::pinn::Dataset;
use lysep::problems::{manufactured_problem, PdeProblem};
use lysep::sampling::{halton_ball, halton_timespace};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const KINDS: [&str; 3] = ["elliptic2d", "parabolic2d", "hyperbolic2d"];

pub fn problem_and_data(name: &str, n: usize, skip: u64) -> (PdeProblem, Dataset) {
    let prob = manufactured_problem(name).unwrap();
    let x = if prob.kind.is_time_dependent() {
        halton_timespace(prob.dim, prob.horizon, n, skip).unwrap()
    } else {
        halton_ball(prob.dim, n, skip).unwrap()
    };
    let y = prob.source_row(&x).unwrap();
    let ds = Dataset::new(&prob, x, y).unwrap();
    (prob, ds)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |_, _| scale * rng.random_range(-1.0..1.0))
}

pub fn random_params(rng: &mut ChaCha8Rng, m: usize, d_in: usize, scale: f64) -> NetworkParams {
    let flat: Vec<f64> = (0..NetworkParams::zeros(m, d_in).len())
        .map(|_| scale * rng.random_range(-1.0..1.0))
        .collect();
    NetworkParams::unflatten(m, d_in, &flat).unwrap()
}

/// `base` plus an independent random perturbation of every entry.
pub fn perturbed_aux(rng: &mut ChaCha8Rng, base: &AuxState, scale: f64) -> AuxState {
    let mut jitter = |a: &DMatrix<f64>| a + random_matrix(rng, a.nrows(), a.ncols(), scale);
    AuxState {
        a1: jitter(&base.a1),
        a2: jitter(&base.a2),
        d1: base.d1.iter().map(&mut jitter).collect(),
        d2: base.d2.iter().map(&mut jitter).collect(),
        q: base.q.iter().map(|q| q.as_ref().map(&mut jitter)).collect(),
    }
}
