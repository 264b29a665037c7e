//! Second-order linear PDEs on the unit ball (and `[0, T] × ball`), their
//! boundary-conforming ansatz factors, and the coefficient rows multiplying
//! `φ`, `∂φ` and `∂²φ` in the expanded residual.
//!
//! * elliptic:   `∇·(c∇u) = f`, ansatz `(‖x‖² − 1)·φ`
//! * parabolic:  `u_t − ∇·(c∇u) = Q`, ansatz `t(‖x‖² − 1)·φ`
//! * hyperbolic: `u_tt − ∇·(c∇u) = Q`, ansatz `t²(‖x‖² − 1)·φ`
//!
//! For time-dependent kinds the network input is `[t; x]`, so input row 0 is
//! time and rows `1..=d` are space.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, RowDVector};

use crate::error::{shape_err, Error, Result};
use crate::linalg::row_inf_norm;

pub type PointFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
/// `(t, x) ↦ value`; elliptic problems ignore `t`.
pub type SpaceTimeFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PdeKind {
    Elliptic,
    Parabolic,
    Hyperbolic,
}

impl PdeKind {
    pub fn is_time_dependent(self) -> bool {
        !matches!(self, PdeKind::Elliptic)
    }

    pub fn input_dim(self, spatial_dim: usize) -> usize {
        spatial_dim + usize::from(self.is_time_dependent())
    }

    /// Whether input coordinate `j` carries a second-derivative term.
    pub fn has_second(self, j: usize) -> bool {
        !(self == PdeKind::Parabolic && j == 0)
    }

    /// Multiplier of `C·J_S` in the consistency bound.
    pub fn bound_factor(self, spatial_dim: usize) -> f64 {
        let d = spatial_dim as f64;
        match self {
            PdeKind::Elliptic => 2.0 * (d + 1.0),
            PdeKind::Parabolic => 2.0 * d + 3.0,
            PdeKind::Hyperbolic => 2.0 * (d + 2.0),
        }
    }
}

impl fmt::Display for PdeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PdeKind::Elliptic => "elliptic",
            PdeKind::Parabolic => "parabolic",
            PdeKind::Hyperbolic => "hyperbolic",
        })
    }
}

#[derive(Clone)]
pub struct PdeProblem {
    pub name: String,
    pub kind: PdeKind,
    pub dim: usize,
    /// Time horizon `T`; unused for elliptic problems.
    pub horizon: f64,
    pub coeff_c: PointFn,
    pub grad_c: Option<GradFn>,
    pub source: SpaceTimeFn,
    pub true_solution: Option<SpaceTimeFn>,
}

impl fmt::Debug for PdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PdeProblem")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

impl PdeProblem {
    pub fn input_dim(&self) -> usize {
        self.kind.input_dim(self.dim)
    }

    /// Splits an input column into `(t, x)`.
    pub fn split<'a>(&self, column: &'a [f64]) -> (f64, &'a [f64]) {
        if self.kind.is_time_dependent() {
            (column[0], &column[1..])
        } else {
            (0.0, column)
        }
    }

    fn spatial_offset(&self) -> usize {
        usize::from(self.kind.is_time_dependent())
    }

    fn check_batch(&self, batch: &DMatrix<f64>) -> Result<()> {
        if batch.nrows() != self.input_dim() {
            return Err(Error::KindMismatch(format!(
                "{} problem in {} dims expects {} input rows, batch has {}",
                self.kind,
                self.dim,
                self.input_dim(),
                batch.nrows()
            )));
        }
        if batch.ncols() == 0 {
            return Err(shape_err("batch", "nonempty", 0));
        }
        Ok(())
    }

    /// The boundary/initial factor multiplying `φ` in the ansatz.
    pub fn ansatz_factor(&self, batch: &DMatrix<f64>) -> Result<RowDVector<f64>> {
        self.check_batch(batch)?;
        let off = self.spatial_offset();
        Ok(RowDVector::from_iterator(
            batch.ncols(),
            batch.column_iter().map(|col| {
                let r2 = col.rows(off, self.dim).norm_squared();
                let base = r2 - 1.0;
                match self.kind {
                    PdeKind::Elliptic => base,
                    PdeKind::Parabolic => col[0] * base,
                    PdeKind::Hyperbolic => col[0] * col[0] * base,
                }
            }),
        ))
    }

    pub fn source_row(&self, batch: &DMatrix<f64>) -> Result<RowDVector<f64>> {
        self.check_batch(batch)?;
        Ok(self.eval_row(batch, &self.source))
    }

    pub fn solution_row(&self, batch: &DMatrix<f64>) -> Result<RowDVector<f64>> {
        self.check_batch(batch)?;
        let u = self
            .true_solution
            .as_ref()
            .ok_or_else(|| Error::Config(format!("problem `{}` has no true solution", self.name)))?;
        Ok(self.eval_row(batch, u))
    }

    fn eval_row(&self, batch: &DMatrix<f64>, f: &SpaceTimeFn) -> RowDVector<f64> {
        RowDVector::from_iterator(
            batch.ncols(),
            batch.column_iter().map(|col| {
                let col: Vec<f64> = col.iter().copied().collect();
                let (t, x) = self.split(&col);
                f(t, x)
            }),
        )
    }
}

/// `ψ = factor ∘ φ` columnwise.
pub fn ansatz_value(prob: &PdeProblem, trace_out: &RowDVector<f64>, batch: &DMatrix<f64>) -> Result<RowDVector<f64>> {
    let factor = prob.ansatz_factor(batch)?;
    if factor.len() != trace_out.len() {
        return Err(shape_err("ansatz", batch.ncols(), trace_out.len()));
    }
    Ok(factor.component_mul(trace_out))
}

/// Cached `|·|_∞` of every stored coefficient row.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffNorms {
    pub k: f64,
    pub k_i: Vec<f64>,
    pub k_hat: f64,
    pub k_0: Option<f64>,
    pub k_hat_0: Option<f64>,
    pub k_hat_i: Vec<f64>,
}

/// Coefficient rows of the expanded residual, evaluated on a batch.
///
/// `k_i` and `k_hat_i` are indexed by spatial coordinate `0..d`. Signs are as
/// printed for each kind; [`CoeffBundle::terms`] folds them into the signed
/// per-input-coordinate layout used by the residual.
#[derive(Debug, Clone)]
pub struct CoeffBundle {
    pub kind: PdeKind,
    pub k: RowDVector<f64>,
    pub k_i: Vec<RowDVector<f64>>,
    pub k_hat: RowDVector<f64>,
    pub k_0: Option<RowDVector<f64>>,
    pub k_hat_0: Option<RowDVector<f64>>,
    pub k_hat_i: Vec<RowDVector<f64>>,
    pub inf_norms: CoeffNorms,
}

/// Signed residual coefficients per network input coordinate `j`:
///
/// `Φ = phi∘φ + Σ_j first[j]∘∂_jφ + Σ_j second[j]∘∂_jjφ`
#[derive(Debug, Clone)]
pub struct ResidualTerms {
    pub phi: RowDVector<f64>,
    pub first: Vec<RowDVector<f64>>,
    pub second: Vec<Option<RowDVector<f64>>>,
    pub phi_inf: f64,
    pub first_inf: Vec<f64>,
    /// Zero where `second[j]` is absent.
    pub second_inf: Vec<f64>,
}

impl ResidualTerms {
    pub fn input_dim(&self) -> usize {
        self.first.len()
    }

    pub fn batch_len(&self) -> usize {
        self.phi.len()
    }
}

impl CoeffBundle {
    pub fn batch_len(&self) -> usize {
        self.k.len()
    }

    pub fn terms(&self) -> ResidualTerms {
        let (first, second): (Vec<RowDVector<f64>>, Vec<Option<RowDVector<f64>>>) = match self.kind {
            PdeKind::Elliptic => (
                self.k_i.clone(),
                self.k_i.iter().map(|_| Some(self.k_hat.clone())).collect(),
            ),
            PdeKind::Parabolic => {
                let mut first = vec![self.k_0.clone().expect("parabolic K0")];
                first.extend(self.k_i.iter().map(|r| -r));
                let mut second = vec![None];
                second.extend(self.k_i.iter().map(|_| Some(-&self.k_hat)));
                (first, second)
            }
            PdeKind::Hyperbolic => {
                let mut first = vec![self.k_0.clone().expect("hyperbolic K0")];
                first.extend(self.k_i.iter().map(|r| -r));
                let mut second = vec![Some(self.k_hat_0.clone().expect("hyperbolic K̂0"))];
                second.extend(self.k_hat_i.iter().map(|r| Some(-r)));
                (first, second)
            }
        };
        let first_inf = first.iter().map(row_inf_norm).collect();
        let second_inf = second.iter().map(|r| r.as_ref().map_or(0.0, row_inf_norm)).collect();
        ResidualTerms {
            phi_inf: row_inf_norm(&self.k),
            phi: self.k.clone(),
            first,
            second,
            first_inf,
            second_inf,
        }
    }
}

pub fn coeff_bundle(prob: &PdeProblem, batch: &DMatrix<f64>) -> Result<CoeffBundle> {
    prob.check_batch(batch)?;
    let grad_c = prob
        .grad_c
        .as_ref()
        .ok_or_else(|| Error::Config(format!("problem `{}` has no grad_c", prob.name)))?;
    let (n, d) = (batch.ncols(), prob.dim);
    let off = prob.spatial_offset();
    let df = d as f64;

    let mut k = RowDVector::zeros(n);
    let mut k_i = vec![RowDVector::zeros(n); d];
    let mut k_hat = RowDVector::zeros(n);
    let time = prob.kind.is_time_dependent();
    let mut k_0 = time.then(|| RowDVector::zeros(n));
    let mut k_hat_0 = (prob.kind == PdeKind::Hyperbolic).then(|| RowDVector::zeros(n));
    let mut k_hat_i = if prob.kind == PdeKind::Hyperbolic {
        vec![RowDVector::zeros(n); d]
    } else {
        Vec::new()
    };

    for (col_idx, col) in batch.column_iter().enumerate() {
        let x: Vec<f64> = col.rows(off, d).iter().copied().collect();
        let t = if time { col[0] } else { 0.0 };
        let c = (prob.coeff_c)(&x);
        let g = grad_c(&x);
        if g.len() != d {
            return Err(shape_err("grad_c", d, g.len()));
        }
        let xhat_m1 = x.iter().map(|v| v * v).sum::<f64>() - 1.0;
        let x_dot_g: f64 = x.iter().zip(&g).map(|(a, b)| a * b).sum();
        // elliptic operator rows: K^e, K^e_i, K̂^e
        let ke = 2.0 * (df * c + x_dot_g);
        let ke_hat = c * xhat_m1;
        match prob.kind {
            PdeKind::Elliptic => {
                k[col_idx] = ke;
                k_hat[col_idx] = ke_hat;
                for i in 0..d {
                    k_i[i][col_idx] = 4.0 * x[i] * c + g[i] * xhat_m1;
                }
            }
            PdeKind::Parabolic => {
                k[col_idx] = xhat_m1 - 2.0 * df * c * t - 2.0 * t * x_dot_g;
                k_0.as_mut().unwrap()[col_idx] = t * xhat_m1;
                k_hat[col_idx] = c * t * xhat_m1;
                for i in 0..d {
                    k_i[i][col_idx] = t * (xhat_m1 * g[i] + 4.0 * x[i] * c);
                }
            }
            PdeKind::Hyperbolic => {
                let t2 = t * t;
                let kh0 = t2 * xhat_m1;
                k[col_idx] = 2.0 * (xhat_m1 - df * t2 * c - t2 * x_dot_g);
                k_0.as_mut().unwrap()[col_idx] = 4.0 * t * xhat_m1;
                k_hat_0.as_mut().unwrap()[col_idx] = kh0;
                k_hat[col_idx] = c * kh0;
                for i in 0..d {
                    k_i[i][col_idx] = kh0 * g[i] + 4.0 * t2 * x[i] * c;
                    k_hat_i[i][col_idx] = c * kh0;
                }
            }
        }
    }

    let inf_norms = CoeffNorms {
        k: row_inf_norm(&k),
        k_i: k_i.iter().map(row_inf_norm).collect(),
        k_hat: row_inf_norm(&k_hat),
        k_0: k_0.as_ref().map(row_inf_norm),
        k_hat_0: k_hat_0.as_ref().map(row_inf_norm),
        k_hat_i: k_hat_i.iter().map(row_inf_norm).collect(),
    };
    Ok(CoeffBundle {
        kind: prob.kind,
        k,
        k_i,
        k_hat,
        k_0,
        k_hat_0,
        k_hat_i,
        inf_norms,
    })
}

// ---------------------------------------------------------------------------
// Manufactured problems

fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `u = (exp(‖x‖²−1) − 1)·Σ sin x_i`, `c = ‖x‖²`.
fn elliptic_exp_sin(d: usize) -> PdeProblem {
    let df = d as f64;
    let solution: SpaceTimeFn = Arc::new(|_, x: &[f64]| {
        ((norm_sq(x) - 1.0).exp() - 1.0) * x.iter().map(|v| v.sin()).sum::<f64>()
    });
    // f = c·Δu + ∇c·∇u with
    //   A = e^{r²−1} − 1, ∇A = 2x e^{r²−1}, ΔA = e^{r²−1}(2d + 4r²)
    //   S = Σ sin x_i,    ∇S = cos x,      ΔS = −S
    //   Δu = S ΔA + 2 ∇A·∇S + A ΔS,  ∇c = 2x
    let source: SpaceTimeFn = Arc::new(move |_, x: &[f64]| {
        let r2 = norm_sq(x);
        let e = (r2 - 1.0).exp();
        let a = e - 1.0;
        let s: f64 = x.iter().map(|v| v.sin()).sum();
        let lap_a = e * (2.0 * df + 4.0 * r2);
        let grad_dot: f64 = x.iter().map(|v| 2.0 * v * e * v.cos()).sum();
        let lap_u = s * lap_a + 2.0 * grad_dot - a * s;
        let gradc_dot_gradu: f64 = x.iter().map(|v| 2.0 * v * (s * 2.0 * v * e + a * v.cos())).sum();
        r2 * lap_u + gradc_dot_gradu
    });
    PdeProblem {
        name: format!("elliptic{d}d"),
        kind: PdeKind::Elliptic,
        dim: d,
        horizon: 0.0,
        coeff_c: Arc::new(norm_sq),
        grad_c: Some(Arc::new(|x: &[f64]| x.iter().map(|v| 2.0 * v).collect())),
        source,
        true_solution: Some(solution),
    }
}

/// `u = sin((‖x‖²−1)/d)`, `c = ‖x‖²/d`.
fn elliptic_radial(d: usize) -> PdeProblem {
    let df = d as f64;
    // g = (r²−1)/d, ∇g = 2x/d, Δg = 2
    // Δu = 2 cos g − (4r²/d²) sin g,  ∇c·∇u = (4r²/d²) cos g
    let source: SpaceTimeFn = Arc::new(move |_, x: &[f64]| {
        let r2 = norm_sq(x);
        let g = (r2 - 1.0) / df;
        let lap_u = 2.0 * g.cos() - 4.0 * r2 / (df * df) * g.sin();
        r2 / df * lap_u + 4.0 * r2 / (df * df) * g.cos()
    });
    PdeProblem {
        name: format!("elliptic{d}d"),
        kind: PdeKind::Elliptic,
        dim: d,
        horizon: 0.0,
        coeff_c: Arc::new(move |x: &[f64]| norm_sq(x) / df),
        grad_c: Some(Arc::new(move |x: &[f64]| x.iter().map(|v| 2.0 * v / df).collect())),
        source,
        true_solution: Some(Arc::new(move |_, x: &[f64]| ((norm_sq(x) - 1.0) / df).sin())),
    }
}

/// Spatial factor `v = sin((‖x‖²−1)/d)·Σ cos(x_i/√d)` of the time-dependent
/// solutions, with `∇·(c∇v)` for `c = mean(x) + 2`.
struct SpatialProfile {
    d: f64,
}

impl SpatialProfile {
    fn value(&self, x: &[f64]) -> f64 {
        let sd = self.d.sqrt();
        ((norm_sq(x) - 1.0) / self.d).sin() * x.iter().map(|v| (v / sd).cos()).sum::<f64>()
    }

    /// `∇·(c∇v) = c Δv + ∇c·∇v`, `∇c = (1/d)·1`.
    ///
    /// With `s = sin g`, `C = Σ cos(x_i/√d)`:
    ///   `∂_i s = cos g·2x_i/d`, `Δs = 2 cos g − (4r²/d²) sin g`,
    ///   `∂_i C = −sin(x_i/√d)/√d`, `ΔC = −C/d`,
    ///   `Δv = C Δs + 2∇s·∇C + s ΔC`.
    fn operator(&self, x: &[f64]) -> f64 {
        let d = self.d;
        let sd = d.sqrt();
        let r2 = norm_sq(x);
        let g = (r2 - 1.0) / d;
        let (s, cg) = (g.sin(), g.cos());
        let cap_c: f64 = x.iter().map(|v| (v / sd).cos()).sum();
        let ds: Vec<f64> = x.iter().map(|v| cg * 2.0 * v / d).collect();
        let dc: Vec<f64> = x.iter().map(|v| -(v / sd).sin() / sd).collect();
        let lap_s = 2.0 * cg - 4.0 * r2 / (d * d) * s;
        let lap_c = -cap_c / d;
        let cross: f64 = ds.iter().zip(&dc).map(|(a, b)| a * b).sum();
        let lap_v = cap_c * lap_s + 2.0 * cross + s * lap_c;
        let grad_sum: f64 = ds.iter().zip(&dc).map(|(a, b)| cap_c * a + s * b).sum();
        let c = x.iter().sum::<f64>() / d + 2.0;
        c * lap_v + grad_sum / d
    }
}

fn shifted_mean_coeff(d: usize) -> (PointFn, GradFn) {
    let df = d as f64;
    (
        Arc::new(move |x: &[f64]| x.iter().sum::<f64>() / df + 2.0),
        Arc::new(move |x: &[f64]| vec![1.0 / df; x.len()]),
    )
}

/// `u = (exp(−t/d) − 1)·v(x)`, `Q = u_t − ∇·(c∇u)`.
fn parabolic(d: usize) -> PdeProblem {
    let df = d as f64;
    let (c, gc) = shifted_mean_coeff(d);
    let prof = Arc::new(SpatialProfile { d: df });
    let p1 = prof.clone();
    let p2 = prof;
    PdeProblem {
        name: format!("parabolic{d}d"),
        kind: PdeKind::Parabolic,
        dim: d,
        horizon: 1.0,
        coeff_c: c,
        grad_c: Some(gc),
        source: Arc::new(move |t, x: &[f64]| {
            let e = (-t / df).exp();
            let tau = e - 1.0;
            let dtau = -e / df;
            dtau * p1.value(x) - tau * p1.operator(x)
        }),
        true_solution: Some(Arc::new(move |t, x: &[f64]| ((-t / df).exp() - 1.0) * p2.value(x))),
    }
}

/// `u = (exp(−t²/d) − 1)·v(x)`, `Q = u_tt − ∇·(c∇u)`.
fn hyperbolic(d: usize) -> PdeProblem {
    let df = d as f64;
    let (c, gc) = shifted_mean_coeff(d);
    let prof = Arc::new(SpatialProfile { d: df });
    let p1 = prof.clone();
    let p2 = prof;
    PdeProblem {
        name: format!("hyperbolic{d}d"),
        kind: PdeKind::Hyperbolic,
        dim: d,
        horizon: 1.0,
        coeff_c: c,
        grad_c: Some(gc),
        source: Arc::new(move |t, x: &[f64]| {
            let e = (-t * t / df).exp();
            let tau = e - 1.0;
            let ddtau = e * (4.0 * t * t / (df * df) - 2.0 / df);
            ddtau * p1.value(x) - tau * p1.operator(x)
        }),
        true_solution: Some(Arc::new(move |t, x: &[f64]| ((-t * t / df).exp() - 1.0) * p2.value(x))),
    }
}

/// Looks up a manufactured problem by name.
///
/// `elliptic2d` uses the exponential-sine solution; other `elliptic<d>d`
/// names (e.g. `elliptic10d`) use the radial sine solution;
/// `parabolic<d>d` and `hyperbolic<d>d` accept any dimension.
pub fn manufactured_problem(name: &str) -> Result<PdeProblem> {
    let unknown = || Error::UnknownName {
        what: "problem",
        name: name.to_string(),
    };
    let parse = |prefix: &str| -> Option<usize> {
        let rest = name.strip_prefix(prefix)?.strip_suffix('d')?;
        rest.parse().ok().filter(|d| *d >= 1)
    };
    if let Some(d) = parse("elliptic") {
        return Ok(if d == 2 { elliptic_exp_sin(2) } else { elliptic_radial(d) });
    }
    if let Some(d) = parse("parabolic") {
        return Ok(parabolic(d));
    }
    if let Some(d) = parse("hyperbolic") {
        return Ok(hyperbolic(d));
    }
    Err(unknown())
}
