//! The PINN residual `Φ(X; θ)`, its mean-square loss, an analytic parameter
//! gradient, and the full-batch gradient-descent baseline.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::activation::ActivationBundle;
use crate::error::{shape_err, Error, Result};
use crate::linalg::{add_col_broadcast, outer, scale_rows};
use crate::network::NetworkParams;
use crate::problems::{coeff_bundle, CoeffBundle, PdeKind, PdeProblem, ResidualTerms};
use crate::sampling::SampledSet;

/// Training points with their source values and the coefficient rows of the
/// problem evaluated on them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: PdeKind,
    pub dim: usize,
    /// `d_in × N`; row 0 is time for time-dependent kinds.
    pub x: DMatrix<f64>,
    pub y: RowDVector<f64>,
    /// `‖x‖²` of the spatial part.
    pub x_hat: RowDVector<f64>,
    pub t0: Option<RowDVector<f64>>,
    pub t0_hat: Option<RowDVector<f64>>,
    pub bundle: CoeffBundle,
    pub terms: ResidualTerms,
}

const DOMAIN_TOL: f64 = 1e-12;

impl Dataset {
    pub fn new(prob: &PdeProblem, x: DMatrix<f64>, y: RowDVector<f64>) -> Result<Self> {
        if y.len() != x.ncols() {
            return Err(shape_err("dataset values", x.ncols(), y.len()));
        }
        let bundle = coeff_bundle(prob, &x)?;
        let time = prob.kind.is_time_dependent();
        let off = usize::from(time);
        let x_hat = RowDVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.rows(off, prob.dim).norm_squared()));
        if let Some(n) = x_hat.iter().position(|r| *r > 1.0 + DOMAIN_TOL) {
            return Err(Error::Config(format!("training point {n} lies outside the unit ball")));
        }
        for (n, col) in x.column_iter().enumerate() {
            let xs: Vec<f64> = col.rows(off, prob.dim).iter().copied().collect();
            let c = (prob.coeff_c)(&xs);
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::NonPositiveCoefficient { index: n, value: c });
            }
            if time && !(-DOMAIN_TOL..=prob.horizon + DOMAIN_TOL).contains(&col[0]) {
                return Err(Error::Config(format!("training point {n} has t outside [0, T]")));
            }
        }
        let (t0, t0_hat) = if time {
            let t = x.row(0).into_owned();
            let t2 = t.component_mul(&t);
            (Some(t), Some(t2))
        } else {
            (None, None)
        };
        let terms = bundle.terms();
        Ok(Dataset {
            kind: prob.kind,
            dim: prob.dim,
            x,
            y,
            x_hat,
            t0,
            t0_hat,
            bundle,
            terms,
        })
    }

    pub fn from_sampled(prob: &PdeProblem, set: &SampledSet) -> Result<Self> {
        Dataset::new(prob, set.points.clone(), set.values.clone())
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.nrows()
    }
}

/// Everything the residual and its gradient share.
struct PinnPass {
    s1: DMatrix<f64>,
    s1d: DMatrix<f64>,
    s1dd: DMatrix<f64>,
    s1ddd: DMatrix<f64>,
    s2: DMatrix<f64>,
    s2d: DMatrix<f64>,
    s2dd: DMatrix<f64>,
    s2ddd: DMatrix<f64>,
    d2: Vec<DMatrix<f64>>,
    q: Vec<Option<DMatrix<f64>>>,
    residual: RowDVector<f64>,
}

fn check_shapes(p: &NetworkParams, ds: &Dataset) -> Result<()> {
    p.validate()?;
    if p.input_dim() != ds.input_dim() {
        return Err(shape_err("network input dim", ds.input_dim(), p.input_dim()));
    }
    Ok(())
}

fn pass(p: &NetworkParams, act: &ActivationBundle, ds: &Dataset) -> Result<PinnPass> {
    check_shapes(p, ds)?;
    let terms = &ds.terms;
    let z1 = add_col_broadcast(&(&p.w1 * &ds.x), &p.b1);
    let [s1, s1d, s1dd, s1ddd] = act.apply_all(&z1);
    let z2 = add_col_broadcast(&(&p.w2 * &s1), &p.b2);
    let [s2, s2d, s2dd, s2ddd] = act.apply_all(&z2);

    let phi = (&p.w3 * &s2).add_scalar(p.b3);
    let mut residual = terms.phi.component_mul(&phi);
    let mut d2 = Vec::with_capacity(terms.input_dim());
    let mut q = Vec::with_capacity(terms.input_dim());
    for j in 0..terms.input_dim() {
        let col = p.w1.column(j).into_owned();
        let d2j = &p.w2 * scale_rows(&s1d, &col);
        residual += terms.first[j].component_mul(&(&p.w3 * s2d.component_mul(&d2j)));
        let qj = terms.second[j].as_ref().map(|ks| {
            let qj = &p.w2 * scale_rows(&s1dd, &col.component_mul(&col));
            let inner = s2dd.component_mul(&d2j).component_mul(&d2j) + s2d.component_mul(&qj);
            residual += ks.component_mul(&(&p.w3 * inner));
            qj
        });
        d2.push(d2j);
        q.push(qj);
    }
    Ok(PinnPass {
        s1,
        s1d,
        s1dd,
        s1ddd,
        s2,
        s2d,
        s2dd,
        s2ddd,
        d2,
        q,
        residual,
    })
}

/// The residual network `Φ(X; θ)` (before subtracting the source).
pub fn pinn_residual(prob: &PdeProblem, p: &NetworkParams, act: &ActivationBundle, ds: &Dataset) -> Result<RowDVector<f64>> {
    if prob.kind != ds.kind || prob.dim != ds.dim {
        return Err(Error::KindMismatch(format!(
            "dataset is {} in {} dims, problem is {} in {} dims",
            ds.kind, ds.dim, prob.kind, prob.dim
        )));
    }
    Ok(pass(p, act, ds)?.residual)
}

/// `(1/N)·‖Φ − Y‖²`.
pub fn pinn_loss(prob: &PdeProblem, p: &NetworkParams, act: &ActivationBundle, ds: &Dataset) -> Result<f64> {
    let r = pinn_residual(prob, p, act, ds)?;
    Ok((r - &ds.y).norm_squared() / ds.len() as f64)
}

/// Loss and its gradient with respect to every parameter.
pub fn pinn_loss_and_grad(p: &NetworkParams, act: &ActivationBundle, ds: &Dataset) -> Result<(f64, NetworkParams)> {
    let pp = pass(p, act, ds)?;
    let terms = &ds.terms;
    let n = ds.len() as f64;
    let diff = &pp.residual - &ds.y;
    let loss = diff.norm_squared() / n;
    let r = diff * (2.0 / n);

    let rk = r.component_mul(&terms.phi);
    let mut g_w3 = (&pp.s2 * rk.transpose()).transpose();
    let g_b3 = rk.sum();
    let mut g_z2 = outer(&p.w3, &rk).component_mul(&pp.s2d);
    let mut g_d2 = Vec::with_capacity(terms.input_dim());
    let mut g_q = Vec::with_capacity(terms.input_dim());
    for j in 0..terms.input_dim() {
        let d2j = &pp.d2[j];
        let rf = r.component_mul(&terms.first[j]);
        let s2d_d2 = pp.s2d.component_mul(d2j);
        g_w3 += (&s2d_d2 * rf.transpose()).transpose();
        let uj = outer(&p.w3, &rf);
        g_z2 += uj.component_mul(&pp.s2dd).component_mul(d2j);
        let mut gd2j = uj.component_mul(&pp.s2d);
        let gqj = match (&terms.second[j], &pp.q[j]) {
            (Some(ks), Some(qj)) => {
                let rs = r.component_mul(ks);
                let d2sq = d2j.component_mul(d2j);
                let inner = pp.s2dd.component_mul(&d2sq) + pp.s2d.component_mul(qj);
                g_w3 += (&inner * rs.transpose()).transpose();
                let vj = outer(&p.w3, &rs);
                g_z2 += vj.component_mul(&(pp.s2ddd.component_mul(&d2sq) + pp.s2dd.component_mul(qj)));
                gd2j += vj.component_mul(&pp.s2dd).component_mul(d2j) * 2.0;
                Some(vj.component_mul(&pp.s2d))
            }
            _ => None,
        };
        g_d2.push(gd2j);
        g_q.push(gqj);
    }

    let g_b2: DVector<f64> = g_z2.column_sum();
    let mut g_w2 = &g_z2 * pp.s1.transpose();
    let w2t = p.w2.transpose();
    let mut g_z1 = (&w2t * &g_z2).component_mul(&pp.s1d);
    let mut g_w1_extra = DMatrix::zeros(p.width(), p.input_dim());
    for j in 0..terms.input_dim() {
        let col = p.w1.column(j).into_owned();
        let s1d_d1 = scale_rows(&pp.s1d, &col);
        g_w2 += &g_d2[j] * s1d_d1.transpose();
        let ej = &w2t * &g_d2[j];
        g_z1 += scale_rows(&ej.component_mul(&pp.s1dd), &col);
        let mut gd1 = ej.component_mul(&pp.s1d);
        if let Some(gqj) = &g_q[j] {
            let sq = col.component_mul(&col);
            g_w2 += gqj * scale_rows(&pp.s1dd, &sq).transpose();
            let hj = &w2t * gqj;
            g_z1 += scale_rows(&hj.component_mul(&pp.s1ddd), &sq);
            gd1 += scale_rows(&hj.component_mul(&pp.s1dd), &col) * 2.0;
        }
        g_w1_extra.set_column(j, &gd1.column_sum());
    }
    let g_b1 = g_z1.column_sum();
    let g_w1 = &g_z1 * ds.x.transpose() + g_w1_extra;

    Ok((
        loss,
        NetworkParams {
            w1: g_w1,
            b1: g_b1,
            w2: g_w2,
            b2: g_b2,
            w3: g_w3,
            b3: g_b3,
        },
    ))
}

/// `lr_k = lr0·decay^k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { lr0: 1e-3, decay: 0.9995 }
    }
}

impl LrSchedule {
    pub fn at(&self, k: usize) -> f64 {
        self.lr0 * self.decay.powi(k as i32)
    }
}

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

pub fn is_diverged(loss: f64) -> bool {
    !loss.is_finite() || loss > DIVERGENCE_THRESHOLD
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub iter: usize,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct PinnRun {
    pub params: NetworkParams,
    /// `losses[k]` is the loss of the parameters after `k` steps.
    pub losses: Vec<f64>,
    pub diverged: Option<Divergence>,
}

/// Full-batch gradient descent. `observe(k, params, loss)` is called for
/// every iterate, including the initial and final ones. A diverged run stops
/// at the offending iterate and reports it in [`PinnRun::diverged`].
pub fn train_pinn_gd(
    prob: &PdeProblem,
    p0: &NetworkParams,
    act: &ActivationBundle,
    ds: &Dataset,
    iters: usize,
    schedule: LrSchedule,
    mut observe: impl FnMut(usize, &NetworkParams, f64),
) -> Result<PinnRun> {
    if prob.kind != ds.kind {
        return Err(Error::KindMismatch(format!("dataset is {}, problem is {}", ds.kind, prob.kind)));
    }
    let mut p = p0.clone();
    let mut losses = Vec::with_capacity(iters + 1);
    for k in 0..=iters {
        let (loss, g) = pinn_loss_and_grad(&p, act, ds)?;
        losses.push(loss);
        observe(k, &p, loss);
        if is_diverged(loss) {
            return Ok(PinnRun {
                params: p,
                losses,
                diverged: Some(Divergence { iter: k, value: loss }),
            });
        }
        if k == iters {
            break;
        }
        let lr = schedule.at(k);
        p.w1 -= g.w1 * lr;
        p.b1 -= g.b1 * lr;
        p.w2 -= g.w2 * lr;
        p.b2 -= g.b2 * lr;
        p.w3 -= g.w3 * lr;
        p.b3 -= g.b3 * lr;
    }
    Ok(PinnRun {
        params: p,
        losses,
        diverged: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_params;
    use crate::problems::manufactured_problem;
    use crate::sampling::halton_ball;
    use std::sync::Arc;

    fn elliptic_ds(n: usize) -> (PdeProblem, Dataset) {
        let prob = manufactured_problem("elliptic2d").unwrap();
        let x = halton_ball(2, n, 0).unwrap();
        let y = prob.source_row(&x).unwrap();
        let ds = Dataset::new(&prob, x, y).unwrap();
        (prob, ds)
    }

    #[test]
    fn zero_params() {
        let (prob, ds) = elliptic_ds(7);
        let act = crate::activation::make_sin_activation();
        let p = NetworkParams::zeros(4, 2);
        assert!(pinn_residual(&prob, &p, &act, &ds).unwrap().iter().all(|v| *v == 0.0));
        let expected = ds.y.norm_squared() / 7.0;
        assert!((pinn_loss(&prob, &p, &act, &ds).unwrap() - expected).abs() < 1e-15 * expected);
    }

    #[test]
    fn constant_network_with_unit_coefficient() {
        let prob = PdeProblem {
            name: "unit".into(),
            kind: PdeKind::Elliptic,
            dim: 3,
            horizon: 0.0,
            coeff_c: Arc::new(|_| 1.0),
            grad_c: Some(Arc::new(|x: &[f64]| vec![0.0; x.len()])),
            source: Arc::new(|_, _| 0.0),
            true_solution: None,
        };
        let x = halton_ball(3, 5, 0).unwrap();
        let ds = Dataset::new(&prob, x, RowDVector::zeros(5)).unwrap();
        let mut p = NetworkParams::zeros(4, 3);
        p.b3 = 0.7;
        let r = pinn_residual(&prob, &p, &crate::activation::make_sin_activation(), &ds).unwrap();
        assert!(r.iter().all(|v| (v - 6.0 * 0.7).abs() < 1e-15));
    }

    #[test]
    fn matching_source_gives_zero_loss() {
        let (prob, mut ds) = elliptic_ds(9);
        let act = crate::activation::make_sin_activation();
        let p = init_params(6, 2, 3);
        ds.y = pinn_residual(&prob, &p, &act, &ds).unwrap();
        assert_eq!(pinn_loss(&prob, &p, &act, &ds).unwrap(), 0.0);
    }

    #[test]
    fn zero_rate_keeps_loss() {
        let (prob, ds) = elliptic_ds(10);
        let act = crate::activation::make_sin_activation();
        let p = init_params(5, 2, 1);
        let run = train_pinn_gd(&prob, &p, &act, &ds, 5, LrSchedule { lr0: 0.0, decay: 1.0 }, |_, _, _| {}).unwrap();
        assert_eq!(run.losses.len(), 6);
        assert!(run.losses.iter().all(|l| *l == run.losses[0]));
        assert_eq!(run.params, p);
    }

    #[test]
    fn divergence_guard() {
        let (prob, ds) = elliptic_ds(10);
        let act = crate::activation::make_sin_activation();
        let p = init_params(5, 2, 1);
        let run = train_pinn_gd(&prob, &p, &act, &ds, 50, LrSchedule { lr0: 1e6, decay: 1.0 }, |_, _, _| {}).unwrap();
        let div = run.diverged.expect("should diverge");
        assert_eq!(run.losses.len(), div.iter + 1);
        assert!(is_diverged(div.value));
    }

    #[test]
    fn rejects_points_outside_domain_and_bad_coefficient() {
        let prob = manufactured_problem("elliptic2d").unwrap();
        let x = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        assert!(Dataset::new(&prob, x, RowDVector::zeros(1)).is_err());
        // c = ‖x‖² vanishes at the origin, which is allowed
        assert!(Dataset::new(&prob, DMatrix::zeros(2, 1), RowDVector::zeros(1)).is_ok());
        let mut neg = prob.clone();
        neg.coeff_c = Arc::new(|x: &[f64]| x[0]);
        let x = DMatrix::from_column_slice(2, 2, &[0.5, 0.0, -0.5, 0.0]);
        assert!(matches!(
            Dataset::new(&neg, x, RowDVector::zeros(2)),
            Err(Error::NonPositiveCoefficient { index: 1, .. })
        ));
    }
}
