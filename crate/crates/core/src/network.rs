//! Three-layer fully connected network `φ = W3 σ(W2 σ(W1 x + b1) + b2) + b3`
//! evaluated columnwise on a batch, with analytic input derivatives.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::activation::ActivationBundle;
use crate::error::{shape_err, Error, Result};
use crate::linalg::{add_col_broadcast, scale_rows};

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w3: RowDVector<f64>,
    pub b3: f64,
}

impl NetworkParams {
    pub fn zeros(width: usize, input_dim: usize) -> Self {
        NetworkParams {
            w1: DMatrix::zeros(width, input_dim),
            b1: DVector::zeros(width),
            w2: DMatrix::zeros(width, width),
            b2: DVector::zeros(width),
            w3: RowDVector::zeros(width),
            b3: 0.0,
        }
    }

    pub fn width(&self) -> usize {
        self.w1.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.width();
        if m == 0 || self.input_dim() == 0 {
            return Err(shape_err("network", "positive width and input dim", format!("{m}x{}", self.input_dim())));
        }
        let shapes = [
            ("b1", self.b1.len(), m),
            ("W2 rows", self.w2.nrows(), m),
            ("W2 cols", self.w2.ncols(), m),
            ("b2", self.b2.len(), m),
            ("W3", self.w3.len(), m),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(shape_err("network", format!("{name} = {want}"), got));
            }
        }
        if !self.flatten().iter().all(|v| v.is_finite()) {
            return Err(Error::Config("network parameters must be finite".into()));
        }
        Ok(())
    }

    /// All parameters in the snapshot order `W1 (row-major), b1, W2 (row-major), b2, W3, b3`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.w1.transpose().iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.transpose().iter());
        out.extend(self.b2.iter());
        out.extend(self.w3.iter());
        out.push(self.b3);
        out
    }

    pub fn len(&self) -> usize {
        let (m, d) = (self.width(), self.input_dim());
        m * d + m + m * m + m + m + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn unflatten(width: usize, input_dim: usize, values: &[f64]) -> Result<Self> {
        let mut p = NetworkParams::zeros(width, input_dim);
        if values.len() != p.len() {
            return Err(shape_err("parameter vector", p.len(), values.len()));
        }
        let mut it = values.iter().copied();
        let mut take = |k: usize| -> Vec<f64> { it.by_ref().take(k).collect() };
        let (m, d) = (width, input_dim);
        p.w1 = DMatrix::from_row_slice(m, d, &take(m * d));
        p.b1 = DVector::from_vec(take(m));
        p.w2 = DMatrix::from_row_slice(m, m, &take(m * m));
        p.b2 = DVector::from_vec(take(m));
        p.w3 = RowDVector::from_vec(take(m));
        p.b3 = take(1)[0];
        Ok(p)
    }

    /// Text snapshot: a header line `M d_in` followed by one value per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.width(), self.input_dim());
        for v in self.flatten() {
            writeln!(s, "{v:.17e}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Config("empty snapshot".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Config(format!("bad snapshot header `{header}`"))))
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(Error::Config(format!("bad snapshot header `{header}`")));
        }
        let values: Vec<f64> = lines
            .map(|l| l.trim().parse().map_err(|_| Error::Config(format!("bad snapshot value `{l}`"))))
            .collect::<Result<_>>()?;
        Self::unflatten(dims[0], dims[1], &values)
    }
}

/// Draws every entry i.i.d. from `U(-M^{-1/2}, M^{-1/2})` using a ChaCha
/// stream keyed by `seed`, in snapshot order.
pub fn init_params(width: usize, input_dim: usize, seed: u64) -> NetworkParams {
    assert!(width >= 1 && input_dim >= 1);
    let h = (width as f64).powf(-0.5);
    let dist = Uniform::new(-h, h).expect("valid uniform range");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = NetworkParams::zeros(width, input_dim).len();
    let values: Vec<f64> = (0..n)
        .map(|_| loop {
            let v = dist.sample(&mut rng);
            if v > -h {
                break v;
            }
        })
        .collect();
    NetworkParams::unflatten(width, input_dim, &values).expect("length matches")
}

/// Pre-activations and output of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub z1: DMatrix<f64>,
    pub z2: DMatrix<f64>,
    pub out: RowDVector<f64>,
}

impl ForwardTrace {
    pub fn batch_len(&self) -> usize {
        self.out.len()
    }
}

pub fn forward(p: &NetworkParams, act: &ActivationBundle, x: &DMatrix<f64>) -> Result<ForwardTrace> {
    if x.nrows() != p.input_dim() {
        return Err(shape_err("forward input rows", p.input_dim(), x.nrows()));
    }
    if x.ncols() == 0 {
        return Err(shape_err("forward batch", "at least one column", 0));
    }
    let z1 = add_col_broadcast(&(&p.w1 * x), &p.b1);
    let z2 = add_col_broadcast(&(&p.w2 * act.apply(&z1)), &p.b2);
    let out = (&p.w3 * act.apply(&z2)).add_scalar(p.b3);
    Ok(ForwardTrace { z1, z2, out })
}

/// Activation derivatives shared by every input coordinate.
pub(crate) struct DerivativeCache {
    s1d: DMatrix<f64>,
    s1dd: DMatrix<f64>,
    s2d: DMatrix<f64>,
    s2dd: DMatrix<f64>,
}

impl DerivativeCache {
    pub(crate) fn new(act: &ActivationBundle, trace: &ForwardTrace) -> Self {
        DerivativeCache {
            s1d: act.apply_d1(&trace.z1),
            s1dd: act.apply_d2(&trace.z1),
            s2d: act.apply_d1(&trace.z2),
            s2dd: act.apply_d2(&trace.z2),
        }
    }

    /// `(d2i, ∂φ/∂x_i)`.
    fn first(&self, p: &NetworkParams, i: usize) -> (DMatrix<f64>, RowDVector<f64>) {
        let col = p.w1.column(i).into_owned();
        let d2 = &p.w2 * scale_rows(&self.s1d, &col);
        let out = &p.w3 * self.s2d.component_mul(&d2);
        (d2, out)
    }

    pub(crate) fn derivatives(&self, p: &NetworkParams, i: usize, second: bool) -> (RowDVector<f64>, Option<RowDVector<f64>>) {
        let (d2, first) = self.first(p, i);
        if !second {
            return (first, None);
        }
        let col = p.w1.column(i).into_owned();
        let sq = col.component_mul(&col);
        let q = &p.w2 * scale_rows(&self.s1dd, &sq);
        let inner = self.s2dd.component_mul(&d2).component_mul(&d2) + self.s2d.component_mul(&q);
        (first, Some(&p.w3 * inner))
    }
}

fn check_index(p: &NetworkParams, trace: &ForwardTrace, i: usize) -> Result<()> {
    if i >= p.input_dim() {
        return Err(Error::Index {
            what: "input coordinate",
            index: i,
            len: p.input_dim(),
        });
    }
    if trace.z1.nrows() != p.width() {
        return Err(shape_err("trace width", p.width(), trace.z1.nrows()));
    }
    Ok(())
}

/// `∂φ/∂x_i` for every batch column.
pub fn first_derivative(p: &NetworkParams, act: &ActivationBundle, trace: &ForwardTrace, i: usize) -> Result<RowDVector<f64>> {
    check_index(p, trace, i)?;
    Ok(DerivativeCache::new(act, trace).derivatives(p, i, false).0)
}

/// `∂²φ/∂x_i²` for every batch column.
pub fn second_derivative(p: &NetworkParams, act: &ActivationBundle, trace: &ForwardTrace, i: usize) -> Result<RowDVector<f64>> {
    check_index(p, trace, i)?;
    Ok(DerivativeCache::new(act, trace).derivatives(p, i, true).1.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::make_sin_activation;

    /// Per-column scalar re-implementation of the forward map.
    fn scalar_phi(p: &NetworkParams, x: &[f64]) -> f64 {
        let m = p.width();
        let h1: Vec<f64> = (0..m)
            .map(|r| (p.b1[r] + (0..x.len()).map(|c| p.w1[(r, c)] * x[c]).sum::<f64>()).sin())
            .collect();
        let h2: Vec<f64> = (0..m)
            .map(|r| (p.b2[r] + (0..m).map(|c| p.w2[(r, c)] * h1[c]).sum::<f64>()).sin())
            .collect();
        p.b3 + (0..m).map(|r| p.w3[r] * h2[r]).sum::<f64>()
    }

    fn batch(d: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let p = init_params(n, d, seed);
        DMatrix::from_fn(d, n, |r, c| p.w1[(c, r)] * (n as f64).sqrt())
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = NetworkParams::zeros(4, 2);
        let t = forward(&p, &make_sin_activation(), &batch(2, 3, 1)).unwrap();
        assert_eq!(t.out, RowDVector::zeros(3));
    }

    #[test]
    fn constant_bias_path() {
        let mut p = init_params(4, 2, 3);
        p.w1.fill(0.0);
        p.w2.fill(0.0);
        p.w3.fill(0.0);
        p.b3 = 2.5;
        let t = forward(&p, &make_sin_activation(), &batch(2, 5, 2)).unwrap();
        assert!(t.out.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let act = make_sin_activation();
        let p = init_params(5, 2, 11);
        let x = batch(2, 4, 7);
        let t = forward(&p, &act, &x).unwrap();
        for n in 0..4 {
            let col: Vec<f64> = x.column(n).iter().copied().collect();
            assert!((t.out[n] - scalar_phi(&p, &col)).abs() < 1e-14);
        }
    }

    #[test]
    fn one_neuron_chain() {
        let act = make_sin_activation();
        let mut p = NetworkParams::zeros(1, 1);
        p.w1[(0, 0)] = 1.0;
        p.w2[(0, 0)] = 1.0;
        p.w3[0] = 1.0;
        let x = DMatrix::from_element(1, 1, 0.0);
        let t = forward(&p, &act, &x).unwrap();
        assert_eq!(first_derivative(&p, &act, &t, 0).unwrap()[0], 1.0);
        assert_eq!(second_derivative(&p, &act, &t, 0).unwrap()[0], 0.0);
    }

    #[test]
    fn no_input_dependence_without_w1() {
        let act = make_sin_activation();
        let mut p = init_params(3, 2, 5);
        p.w1.fill(0.0);
        let t = forward(&p, &act, &batch(2, 4, 1)).unwrap();
        assert_eq!(first_derivative(&p, &act, &t, 1).unwrap(), RowDVector::zeros(4));
        assert_eq!(second_derivative(&p, &act, &t, 0).unwrap(), RowDVector::zeros(4));
    }

    #[test]
    fn index_and_shape_errors() {
        let act = make_sin_activation();
        let p = init_params(3, 2, 5);
        let t = forward(&p, &act, &batch(2, 4, 1)).unwrap();
        assert!(matches!(first_derivative(&p, &act, &t, 2), Err(Error::Index { .. })));
        assert!(forward(&p, &act, &batch(3, 4, 1)).is_err());
    }

    #[test]
    fn linear_in_output_layer() {
        let act = make_sin_activation();
        let p = init_params(4, 2, 9);
        let x = batch(2, 6, 4);
        let base = forward(&p, &act, &x).unwrap();
        let mut scaled = p.clone();
        scaled.w3 *= 3.0;
        let t = forward(&scaled, &act, &x).unwrap();
        for n in 0..6 {
            let lhs = t.out[n] - p.b3;
            let rhs = 3.0 * (base.out[n] - p.b3);
            assert!((lhs - rhs).abs() < 1e-14);
        }
        let g0 = second_derivative(&p, &act, &base, 1).unwrap();
        let g1 = second_derivative(&scaled, &act, &t, 1).unwrap();
        assert!((g1 - g0 * 3.0).norm() < 1e-13);
    }

    #[test]
    fn snapshot_round_trip() {
        let p = init_params(3, 2, 42);
        let back = NetworkParams::from_text(&p.to_text()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn init_bounds_and_determinism() {
        let p = init_params(100, 3, 7);
        assert!(p.flatten().iter().all(|v| v.abs() < 0.1));
        assert_eq!(p, init_params(100, 3, 7));
        assert_ne!(p, init_params(100, 3, 8));
    }

    #[test]
    fn init_mean_within_three_sigma() {
        // U(-h, h) has variance h²/3; the sample mean of n draws has sd h/sqrt(3n)
        let p = init_params(100, 1, 123);
        let v = p.flatten();
        let v = &v[..10_000];
        let h = 0.1;
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = h / (3.0 * v.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * sd, "mean {mean} sd {sd}");
    }
}
