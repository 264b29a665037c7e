//! Halton point sets in the unit ball and in `[0, T] × ball`, and the
//! relative ℓ² error used for evaluation.

use nalgebra::{DMatrix, RowDVector};

use crate::error::{shape_err, Error, Result};
use crate::problems::PdeProblem;

/// Radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += f * (index % b) as f64;
        index /= b;
        f *= inv;
    }
    r
}

pub fn first_primes(n: usize) -> Vec<u32> {
    let mut primes = Vec::with_capacity(n);
    let mut k = 2u32;
    while primes.len() < n {
        if primes.iter().take_while(|p| *p * *p <= k).all(|p| !k.is_multiple_of(*p)) {
            primes.push(k);
        }
        k += 1;
    }
    primes
}

/// How a cube point `y ∈ [−1, 1]^d` is brought into the unit ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BallMapping {
    /// Discard points with `‖y‖ > 1`.
    #[default]
    Rejection,
    /// `y ↦ y·‖y‖_∞/‖y‖₂`, a bijection of the cube onto the ball. Useful in
    /// high dimension where the rejection rate becomes prohibitive.
    Radial,
}

/// A sampled point matrix plus the raw Halton index one past the last point
/// consumed, so that a following set can start after it.
#[derive(Debug, Clone)]
pub struct HaltonDraw {
    pub points: DMatrix<f64>,
    pub next_skip: u64,
}

/// Raw Halton indices start at 1; `skip` raw points are dropped first.
fn draw(
    d: usize,
    time: Option<f64>,
    count: usize,
    skip: u64,
    mapping: BallMapping,
) -> Result<HaltonDraw> {
    if d == 0 {
        return Err(shape_err("halton dimension", ">= 1", 0));
    }
    let extra = usize::from(time.is_some());
    let bases = first_primes(d + extra);
    let rows = d + extra;
    let mut data = Vec::with_capacity(rows * count);
    let mut y = vec![0.0; d];
    let mut raw = skip;
    let mut accepted = 0;
    while accepted < count {
        raw += 1;
        for (k, yk) in y.iter_mut().enumerate() {
            *yk = 2.0 * radical_inverse(raw, bases[k]) - 1.0;
        }
        let n2: f64 = y.iter().map(|v| v * v).sum();
        match mapping {
            BallMapping::Rejection => {
                if n2 > 1.0 {
                    continue;
                }
            }
            BallMapping::Radial => {
                if n2 > 0.0 {
                    let inf = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    let s = inf / n2.sqrt();
                    y.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        if let Some(t_max) = time {
            data.push(t_max * radical_inverse(raw, bases[d]));
        }
        data.extend_from_slice(&y);
        accepted += 1;
    }
    Ok(HaltonDraw {
        points: DMatrix::from_column_slice(rows, count, &data),
        next_skip: raw,
    })
}

pub fn halton_ball_with(d: usize, count: usize, skip: u64, mapping: BallMapping) -> Result<HaltonDraw> {
    draw(d, None, count, skip, mapping)
}

pub fn halton_ball(d: usize, count: usize, skip: u64) -> Result<DMatrix<f64>> {
    Ok(halton_ball_with(d, count, skip, BallMapping::Rejection)?.points)
}

/// Row 0 holds `t ∈ [0, T]` drawn from the `(d+1)`-th prime base.
pub fn halton_timespace_with(
    d: usize,
    horizon: f64,
    count: usize,
    skip: u64,
    mapping: BallMapping,
) -> Result<HaltonDraw> {
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::Config(format!("time horizon must be finite and nonnegative, got {horizon}")));
    }
    draw(d, Some(horizon), count, skip, mapping)
}

pub fn halton_timespace(d: usize, horizon: f64, count: usize, skip: u64) -> Result<DMatrix<f64>> {
    Ok(halton_timespace_with(d, horizon, count, skip, BallMapping::Rejection)?.points)
}

/// `‖ψ − u‖₂ / ‖u‖₂`.
pub fn l2_relative_error(psi: &RowDVector<f64>, u: &RowDVector<f64>) -> Result<f64> {
    if psi.len() != u.len() {
        return Err(shape_err("l2_relative_error", u.len(), psi.len()));
    }
    let denom = u.norm();
    if denom == 0.0 {
        return Err(Error::DegenerateTruth);
    }
    Ok((psi - u).norm() / denom)
}

/// Points plus the values attached to them: the source for a training set,
/// the true solution for a test set.
#[derive(Debug, Clone)]
pub struct SampledSet {
    pub points: DMatrix<f64>,
    pub values: RowDVector<f64>,
}

/// Training and test sets for a problem. The test set continues the Halton
/// stream right after the last raw index used by the training set.
pub fn train_test_sets(
    prob: &PdeProblem,
    n_train: usize,
    n_test: usize,
    mapping: BallMapping,
) -> Result<(SampledSet, SampledSet)> {
    let sample = |count, skip| {
        if prob.kind.is_time_dependent() {
            halton_timespace_with(prob.dim, prob.horizon, count, skip, mapping)
        } else {
            halton_ball_with(prob.dim, count, skip, mapping)
        }
    };
    let train = sample(n_train, 0)?;
    let test = sample(n_test, train.next_skip)?;
    let train_values = prob.source_row(&train.points)?;
    let test_values = prob.solution_row(&test.points)?;
    Ok((
        SampledSet {
            points: train.points,
            values: train_values,
        },
        SampledSet {
            points: test.points,
            values: test_values,
        },
    ))
}
