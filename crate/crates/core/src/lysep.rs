//! The layer-separated loss.
//!
//! Auxiliary variables stand for the layer pre-activations and their
//! derivatives:
//!
//! * `a1 ≈ W1·X + b1`,  `a2 ≈ W2·σ(a1) + b2`
//! * `d1j ≈ W1(:,j)·1ᵀ`, `d2j ≈ W2·(σ'(a1)∘d1j)`
//! * `qj ≈ W2·(σ''(a1)∘d1j²)` (only where coordinate `j` carries a second
//!   derivative)
//!
//! and the residual is evaluated on them:
//!
//! `R = K∘(W3σ(a2) + b3) + Σ_j Kf_j∘W3(σ'(a2)∘d2j) + Σ_j Ks_j∘W3(σ''(a2)∘d2j² + σ'(a2)∘qj) − Y`.
//!
//! Each violated constraint is penalized with weights `ω` and per-column
//! diagonals `D` built from the live iterate, so that the separated loss
//! `J_S` bounds the original loss `J` from above up to a constant and equals
//! it at a feasible point.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::activation::ActivationBundle;
use crate::error::{shape_err, Error, Result};
use crate::linalg::{add_col_broadcast, col_norms_sq, outer, replicate_col, scale_cols};
use crate::network::NetworkParams;
use crate::pinn::Dataset;
use crate::problems::{PdeKind, ResidualTerms};

/// Auxiliary variables; every matrix is `M × N`. The families are indexed
/// by network input coordinate `j` (time first for time-dependent kinds).
#[derive(Debug, Clone, PartialEq)]
pub struct AuxState {
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub d1: Vec<DMatrix<f64>>,
    pub d2: Vec<DMatrix<f64>>,
    /// `None` for the time coordinate of parabolic problems.
    pub q: Vec<Option<DMatrix<f64>>>,
}

impl AuxState {
    pub fn zeros(kind: PdeKind, spatial_dim: usize, width: usize, n: usize) -> Self {
        let d_in = kind.input_dim(spatial_dim);
        AuxState {
            a1: DMatrix::zeros(width, n),
            a2: DMatrix::zeros(width, n),
            d1: vec![DMatrix::zeros(width, n); d_in],
            d2: vec![DMatrix::zeros(width, n); d_in],
            q: (0..d_in).map(|j| kind.has_second(j).then(|| DMatrix::zeros(width, n))).collect(),
        }
    }

    pub fn validate(&self, kind: PdeKind, width: usize, n: usize, d_in: usize) -> Result<()> {
        let ok = |m: &DMatrix<f64>| m.nrows() == width && m.ncols() == n;
        let want = format!("{width}x{n}");
        if !ok(&self.a1) || !ok(&self.a2) {
            return Err(shape_err("aux a1/a2", want, format!("{}x{}", self.a1.nrows(), self.a1.ncols())));
        }
        if self.d1.len() != d_in || self.d2.len() != d_in || self.q.len() != d_in {
            return Err(shape_err("aux family length", d_in, self.d1.len()));
        }
        for j in 0..d_in {
            if !ok(&self.d1[j]) || !ok(&self.d2[j]) {
                return Err(shape_err("aux d1/d2", want.clone(), format!("index {j}")));
            }
            match (&self.q[j], kind.has_second(j)) {
                (Some(q), true) if ok(q) => {}
                (None, false) => {}
                _ => {
                    return Err(Error::KindMismatch(format!(
                        "q[{j}] presence or shape does not match a {kind} problem"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// `Σ_n diag(n)²·‖A(:,n)‖²`.
pub fn weighted_norm_sq(a: &DMatrix<f64>, diag: &DVector<f64>) -> Result<f64> {
    if diag.len() != a.ncols() {
        return Err(shape_err("weighted_norm_sq", a.ncols(), diag.len()));
    }
    Ok(a.column_iter().zip(diag.iter()).map(|(c, w)| w * w * c.norm_squared()).sum())
}

/// The constraint targets evaluated at `p`: at this point every penalty
/// vanishes and the separated loss equals the original one.
pub fn feasible_aux(p: &NetworkParams, act: &ActivationBundle, ds: &Dataset) -> Result<AuxState> {
    check_params(p, ds)?;
    let n = ds.len();
    let a1 = add_col_broadcast(&(&p.w1 * &ds.x), &p.b1);
    let s1 = act.apply(&a1);
    let s1d = act.apply_d1(&a1);
    let s1dd = act.apply_d2(&a1);
    let a2 = add_col_broadcast(&(&p.w2 * &s1), &p.b2);
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    let mut q = Vec::new();
    for j in 0..ds.input_dim() {
        let d1j = replicate_col(&p.w1.column(j).into_owned(), n);
        d2.push(&p.w2 * s1d.component_mul(&d1j));
        q.push(ds.kind.has_second(j).then(|| &p.w2 * s1dd.component_mul(&d1j).component_mul(&d1j)));
        d1.push(d1j);
    }
    Ok(AuxState { a1, a2, d1, d2, q })
}

fn check_params(p: &NetworkParams, ds: &Dataset) -> Result<()> {
    p.validate()?;
    if p.input_dim() != ds.input_dim() {
        return Err(shape_err("network input dim", ds.input_dim(), p.input_dim()));
    }
    Ok(())
}

/// Self-adaptive weights and diagonals, one entry per input coordinate `j`
/// for the indexed families. Identity diagonals (`D_d1j^1`, `D_d2j^2` and
/// the one on `qj`) are implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyAssembly {
    pub omega_a1_1: f64,
    pub omega_a1_2: Vec<f64>,
    pub omega_a1_3: Vec<f64>,
    pub omega_a2_1: f64,
    pub omega_a2_2: Vec<f64>,
    pub omega_d1_1: Vec<f64>,
    pub omega_d1_2: Vec<f64>,
    pub omega_d2_1: Vec<f64>,
    pub omega_d2_2: Vec<f64>,
    pub omega_q: Vec<f64>,
    pub diag_a1_1: DVector<f64>,
    pub diag_a1_2: Vec<DVector<f64>>,
    pub diag_a1_3: Vec<DVector<f64>>,
    pub diag_a2_1: DVector<f64>,
    pub diag_a2_2: Vec<DVector<f64>>,
    pub diag_d1_2: Vec<DVector<f64>>,
    pub diag_d2_1: Vec<DVector<f64>>,
}

/// Squared scale factors shared by the assembly and the aggregated weights.
#[derive(Debug, Clone)]
struct Scales {
    w2: f64,
    w3: f64,
    v: Vec<f64>,
    kk: f64,
    kf: Vec<f64>,
    ks: Vec<f64>,
}

impl Scales {
    fn new(p: &NetworkParams, terms: &ResidualTerms) -> Self {
        Scales {
            w2: p.w2.norm_squared(),
            w3: p.w3.norm_squared(),
            v: p.w1.column_iter().map(|c| c.norm_squared()).collect(),
            kk: terms.phi_inf * terms.phi_inf,
            kf: terms.first_inf.iter().map(|k| k * k).collect(),
            ks: terms.second_inf.iter().map(|k| k * k).collect(),
        }
    }
}

/// Per-column squared norms of the derivative auxiliaries.
#[derive(Debug, Clone)]
struct AuxNorms {
    d1: Vec<DVector<f64>>,
    d2: Vec<DVector<f64>>,
    /// Zero where `q[j]` is absent.
    q: Vec<DVector<f64>>,
}

impl AuxNorms {
    fn new(aux: &AuxState) -> Self {
        let n = aux.a1.ncols();
        AuxNorms {
            d1: aux.d1.iter().map(col_norms_sq).collect(),
            d2: aux.d2.iter().map(col_norms_sq).collect(),
            q: aux.q.iter().map(|q| q.as_ref().map_or_else(|| DVector::zeros(n), col_norms_sq)).collect(),
        }
    }
}

fn assemble(s: &Scales, norms: &AuxNorms) -> PenaltyAssembly {
    let d_in = s.v.len();
    let n = norms.d1.first().map_or(0, |v| v.len());
    let (w2, w3) = (s.w2, s.w3);
    let mut a2_1_sq = DVector::from_element(n, s.kk);
    for j in 0..d_in {
        a2_1_sq += &norms.d2[j] * s.kf[j] + &norms.q[j] * s.ks[j];
    }
    let k_hat = |j: usize| s.ks[j].sqrt();
    let diag_a1_2: Vec<DVector<f64>> = (0..d_in).map(|j| norms.d1[j].map(f64::sqrt) * k_hat(j)).collect();
    let diag_a2_2: Vec<DVector<f64>> = (0..d_in).map(|j| norms.d2[j].map(f64::sqrt) * k_hat(j)).collect();
    let sq = |v: &DVector<f64>| v.component_mul(v);
    let diag_a1_3: Vec<DVector<f64>> = (0..d_in)
        .map(|j| (sq(&diag_a1_2[j]) + sq(&diag_a2_2[j])).map(f64::sqrt))
        .collect();
    let mut a1_1_sq = a2_1_sq.clone();
    for j in 0..d_in {
        a1_1_sq += &norms.d1[j] * s.kf[j] + sq(&diag_a1_2[j]).component_mul(&norms.d2[j]);
    }
    let omega_a1_2: Vec<f64> = (0..d_in).map(|j| w3 * w2 * s.v[j]).collect();
    let omega_a1_3: Vec<f64> = (0..d_in).map(|j| w3 * w2 * w2 * s.v[j]).collect();
    PenaltyAssembly {
        omega_a1_1: w3 * w2,
        omega_a2_1: w3,
        omega_a2_2: omega_a1_2.clone(),
        omega_d1_1: (0..d_in).map(|j| s.ks[j] * (omega_a1_2[j] + omega_a1_3[j])).collect(),
        omega_d1_2: vec![w3 * w2; d_in],
        omega_d2_1: vec![w3; d_in],
        omega_d2_2: (0..d_in).map(|j| s.ks[j] * omega_a1_2[j]).collect(),
        omega_q: (0..d_in).map(|j| s.ks[j] * w3).collect(),
        diag_d1_2: (0..d_in).map(|j| (sq(&diag_a1_3[j]).add_scalar(s.kf[j])).map(f64::sqrt)).collect(),
        diag_d2_1: (0..d_in).map(|j| (sq(&diag_a2_2[j]).add_scalar(s.kf[j])).map(f64::sqrt)).collect(),
        omega_a1_2,
        omega_a1_3,
        diag_a1_1: a1_1_sq.map(f64::sqrt),
        diag_a1_2,
        diag_a1_3,
        diag_a2_1: a2_1_sq.map(f64::sqrt),
        diag_a2_2,
    }
}

/// Builds every `ω` and `D` from the live iterate.
pub fn assemble_penalties(p: &NetworkParams, aux: &AuxState, ds: &Dataset) -> Result<PenaltyAssembly> {
    check_params(p, ds)?;
    aux.validate(ds.kind, p.width(), ds.len(), ds.input_dim())?;
    Ok(assemble(&Scales::new(p, &ds.terms), &AuxNorms::new(aux)))
}

/// Value of the separated loss with each penalty group exposed.
///
/// `total` is `residual` plus the penalties summed in listed order.
#[derive(Debug, Clone, PartialEq)]
pub struct SepLoss {
    pub total: f64,
    pub residual: f64,
    pub penalties: Vec<(String, f64)>,
}

impl SepLoss {
    pub fn penalty_sum(&self) -> f64 {
        self.penalties.iter().map(|(_, v)| v).sum()
    }
}

pub fn lysep_loss(
    p: &NetworkParams,
    aux: &AuxState,
    act: &ActivationBundle,
    ds: &Dataset,
    assembly: &PenaltyAssembly,
) -> Result<SepLoss> {
    aux.validate(ds.kind, p.width(), ds.len(), ds.input_dim())?;
    let st = SepState::new(p.clone(), aux.clone(), act, ds)?;
    st.named_loss(assembly)
}

/// `lysep_loss` with the assembly built from the same iterate.
pub fn lysep_loss_auto(p: &NetworkParams, aux: &AuxState, act: &ActivationBundle, ds: &Dataset) -> Result<SepLoss> {
    let assembly = assemble_penalties(p, aux, ds)?;
    lysep_loss(p, aux, act, ds, &assembly)
}

/// Outcome of the consistency inequality `J ≤ factor·C·J_S`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub factor: f64,
    pub bound: f64,
    pub ok: bool,
}

pub const BOUND_SLACK: f64 = 1e-12;

pub fn check_consistency(j: f64, j_s: f64, spatial_dim: usize, kind: PdeKind, c: f64) -> BoundReport {
    let factor = kind.bound_factor(spatial_dim);
    let bound = factor * c * j_s;
    BoundReport {
        factor,
        bound,
        ok: j <= bound + BOUND_SLACK,
    }
}

/// Whether gradients see the dependence of `ω`/`D` on the differentiated
/// variable (`Full`) or treat them as constants (`Frozen`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientConvention {
    #[default]
    Full,
    Frozen,
}

/// Variables updated by gradient steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    W1Col(usize),
    A1,
    D1(usize),
    W2,
    A2,
    D2(usize),
    Q(usize),
}

/// Aggregated per-column weights: the separated loss times `N` is
///
/// `‖R‖² + Σ_n [α1·e1 + α2·e2 + Σ_j (β1j·f1j + β2j·f2j)] + Σ_j ωq_j·‖Gj‖²`
///
/// with `e1, e2, f1j, f2j` the squared column norms of the constraint
/// violations.
#[derive(Debug, Clone)]
struct Weights {
    alpha1: DVector<f64>,
    alpha2: DVector<f64>,
    beta1: Vec<DVector<f64>>,
    beta2: Vec<DVector<f64>>,
    omega_q: Vec<f64>,
}

/// Cached products of the separated loss. Every field is a pure function of
/// `(p, aux)`; the refresh methods recompute the fields downstream of a
/// changed variable, and [`SepState::new`] calls all of them, so an
/// incrementally maintained state equals a freshly built one exactly.
#[derive(Debug, Clone)]
pub struct SepState<'a> {
    pub(crate) ds: &'a Dataset,
    pub(crate) act: ActivationBundle,
    pub p: NetworkParams,
    pub aux: AuxState,
    w1x: DMatrix<f64>,
    e1: DMatrix<f64>,
    f1: Vec<DMatrix<f64>>,
    s1: [DMatrix<f64>; 4],
    p2: Vec<DMatrix<f64>>,
    p3: Vec<Option<DMatrix<f64>>>,
    w2s1: DMatrix<f64>,
    w2p2: Vec<DMatrix<f64>>,
    w2p3: Vec<Option<DMatrix<f64>>>,
    e2: DMatrix<f64>,
    f2: Vec<DMatrix<f64>>,
    g: Vec<Option<DMatrix<f64>>>,
    s2: [DMatrix<f64>; 4],
    inner1: Vec<DMatrix<f64>>,
    inner2: Vec<Option<DMatrix<f64>>>,
    resid: RowDVector<f64>,
    norms: AuxNorms,
    n_e1: DVector<f64>,
    n_e2: DVector<f64>,
    n_f1: Vec<DVector<f64>>,
    n_f2: Vec<DVector<f64>>,
    n_g: Vec<f64>,
}

impl PartialEq for SepState<'_> {
    fn eq(&self, o: &Self) -> bool {
        self.p == o.p
            && self.aux == o.aux
            && self.w1x == o.w1x
            && self.e1 == o.e1
            && self.f1 == o.f1
            && self.s1 == o.s1
            && self.p2 == o.p2
            && self.p3 == o.p3
            && self.w2s1 == o.w2s1
            && self.w2p2 == o.w2p2
            && self.w2p3 == o.w2p3
            && self.e2 == o.e2
            && self.f2 == o.f2
            && self.g == o.g
            && self.s2 == o.s2
            && self.inner1 == o.inner1
            && self.inner2 == o.inner2
            && self.resid == o.resid
            && self.norms.d1 == o.norms.d1
            && self.norms.d2 == o.norms.d2
            && self.norms.q == o.norms.q
            && self.n_e1 == o.n_e1
            && self.n_e2 == o.n_e2
            && self.n_f1 == o.n_f1
            && self.n_f2 == o.n_f2
            && self.n_g == o.n_g
    }
}

impl<'a> SepState<'a> {
    pub fn new(p: NetworkParams, aux: AuxState, act: &ActivationBundle, ds: &'a Dataset) -> Result<Self> {
        check_params(&p, ds)?;
        aux.validate(ds.kind, p.width(), ds.len(), ds.input_dim())?;
        let (m, n, d_in) = (p.width(), ds.len(), ds.input_dim());
        let z = || DMatrix::zeros(m, n);
        let zv = || DVector::zeros(n);
        let mut st = SepState {
            ds,
            act: *act,
            norms: AuxNorms::new(&aux),
            p,
            aux,
            w1x: z(),
            e1: z(),
            f1: vec![z(); d_in],
            s1: [z(), z(), z(), z()],
            p2: vec![z(); d_in],
            p3: vec![None; d_in],
            w2s1: z(),
            w2p2: vec![z(); d_in],
            w2p3: vec![None; d_in],
            e2: z(),
            f2: vec![z(); d_in],
            g: vec![None; d_in],
            s2: [z(), z(), z(), z()],
            inner1: vec![z(); d_in],
            inner2: vec![None; d_in],
            resid: RowDVector::zeros(n),
            n_e1: zv(),
            n_e2: zv(),
            n_f1: vec![zv(); d_in],
            n_f2: vec![zv(); d_in],
            n_g: vec![0.0; d_in],
        };
        st.refresh_w1();
        st.refresh_a1();
        st.refresh_a2();
        Ok(st)
    }

    pub fn input_dim(&self) -> usize {
        self.ds.input_dim()
    }

    fn terms(&self) -> &ResidualTerms {
        &self.ds.terms
    }

    // -- refreshes ---------------------------------------------------------

    pub(crate) fn refresh_w1(&mut self) {
        self.w1x = &self.p.w1 * &self.ds.x;
        self.refresh_e1();
        for j in 0..self.input_dim() {
            self.refresh_f1(j);
        }
    }

    /// After only column `j` of `W1` changed.
    pub(crate) fn refresh_w1_col(&mut self, j: usize) {
        self.w1x = &self.p.w1 * &self.ds.x;
        self.refresh_e1();
        self.refresh_f1(j);
    }

    pub(crate) fn refresh_e1(&mut self) {
        self.e1 = add_col_broadcast(&self.w1x, &self.p.b1) - &self.aux.a1;
        self.n_e1 = col_norms_sq(&self.e1);
    }

    fn refresh_f1(&mut self, j: usize) {
        let n = self.ds.len();
        self.f1[j] = replicate_col(&self.p.w1.column(j).into_owned(), n) - &self.aux.d1[j];
        self.n_f1[j] = col_norms_sq(&self.f1[j]);
    }

    /// After `a1` changed.
    pub(crate) fn refresh_a1(&mut self) {
        self.refresh_e1();
        self.s1 = self.act.apply_all(&self.aux.a1);
        for j in 0..self.input_dim() {
            self.refresh_p23(j);
        }
        self.refresh_w2();
    }

    fn refresh_p23(&mut self, j: usize) {
        let d1 = &self.aux.d1[j];
        self.p2[j] = self.s1[1].component_mul(d1);
        self.p3[j] = self.aux.q[j].as_ref().map(|_| self.s1[2].component_mul(d1).component_mul(d1));
    }

    /// After `d1[j]` changed.
    pub(crate) fn refresh_d1(&mut self, j: usize) {
        self.norms.d1[j] = col_norms_sq(&self.aux.d1[j]);
        self.refresh_f1(j);
        self.refresh_p23(j);
        self.refresh_w2_products_at(j);
    }

    /// After `W2` changed (also the tail of the `a1` refresh).
    pub(crate) fn refresh_w2(&mut self) {
        self.w2s1 = &self.p.w2 * &self.s1[0];
        self.refresh_e2();
        self.refresh_w2_derivative_products();
    }

    fn refresh_w2_derivative_products(&mut self) {
        for j in 0..self.input_dim() {
            self.refresh_w2_products_at(j);
        }
    }

    fn refresh_w2_products_at(&mut self, j: usize) {
        self.w2p2[j] = &self.p.w2 * &self.p2[j];
        self.w2p3[j] = self.p3[j].as_ref().map(|p3| &self.p.w2 * p3);
        self.refresh_f2(j);
        self.refresh_g(j);
    }

    pub(crate) fn refresh_e2(&mut self) {
        self.e2 = add_col_broadcast(&self.w2s1, &self.p.b2) - &self.aux.a2;
        self.n_e2 = col_norms_sq(&self.e2);
    }

    fn refresh_f2(&mut self, j: usize) {
        self.f2[j] = &self.w2p2[j] - &self.aux.d2[j];
        self.n_f2[j] = col_norms_sq(&self.f2[j]);
    }

    fn refresh_g(&mut self, j: usize) {
        self.g[j] = match (&self.w2p3[j], &self.aux.q[j]) {
            (Some(w), Some(q)) => Some(w - q),
            _ => None,
        };
        self.n_g[j] = self.g[j].as_ref().map_or(0.0, |g| g.norm_squared());
    }

    /// After `a2` changed.
    pub(crate) fn refresh_a2(&mut self) {
        self.refresh_e2();
        self.s2 = self.act.apply_all(&self.aux.a2);
        for j in 0..self.input_dim() {
            self.refresh_inner(j);
        }
        self.refresh_resid();
    }

    fn refresh_inner(&mut self, j: usize) {
        let d2 = &self.aux.d2[j];
        self.inner1[j] = self.s2[1].component_mul(d2);
        self.inner2[j] = self.aux.q[j]
            .as_ref()
            .map(|q| self.s2[2].component_mul(d2).component_mul(d2) + self.s2[1].component_mul(q));
    }

    /// After `d2[j]` changed.
    pub(crate) fn refresh_d2(&mut self, j: usize) {
        self.norms.d2[j] = col_norms_sq(&self.aux.d2[j]);
        self.refresh_f2(j);
        self.refresh_inner(j);
        self.refresh_resid();
    }

    /// After `q[j]` changed.
    pub(crate) fn refresh_q(&mut self, j: usize) {
        if let Some(q) = &self.aux.q[j] {
            self.norms.q[j] = col_norms_sq(q);
        }
        self.refresh_g(j);
        self.refresh_inner(j);
        self.refresh_resid();
    }

    /// After `W3` or `b3` changed (also the tail of the other refreshes).
    pub(crate) fn refresh_resid(&mut self) {
        let t = &self.ds.terms;
        let w3 = &self.p.w3;
        let mut r = t.phi.component_mul(&(w3 * &self.s2[0]).add_scalar(self.p.b3));
        for j in 0..self.input_dim() {
            r += t.first[j].component_mul(&(w3 * &self.inner1[j]));
            if let (Some(ks), Some(inner)) = (&t.second[j], &self.inner2[j]) {
                r += ks.component_mul(&(w3 * inner));
            }
        }
        self.resid = r - &self.ds.y;
    }

    // -- loss --------------------------------------------------------------

    /// `R = Φ_S − Y` on the auxiliaries.
    pub fn residual(&self) -> &RowDVector<f64> {
        &self.resid
    }

    fn scales(&self) -> Scales {
        Scales::new(&self.p, self.terms())
    }

    pub fn assembly(&self) -> PenaltyAssembly {
        assemble(&self.scales(), &self.norms)
    }

    fn named_loss(&self, a: &PenaltyAssembly) -> Result<SepLoss> {
        let nf = self.ds.len() as f64;
        let mut pen: Vec<(String, f64)> = Vec::new();
        let ones = DVector::from_element(self.ds.len(), 1.0);
        let mut push = |name: String, omega: f64, m: &DMatrix<f64>, diag: &DVector<f64>| -> Result<()> {
            pen.push((name, omega * weighted_norm_sq(m, diag)? / nf));
            Ok(())
        };
        push("a1^1".into(), a.omega_a1_1, &self.e1, &a.diag_a1_1)?;
        for j in 0..self.input_dim() {
            push(format!("a1^2[{j}]"), a.omega_a1_2[j], &self.e1, &a.diag_a1_2[j])?;
            push(format!("a1^3[{j}]"), a.omega_a1_3[j], &self.e1, &a.diag_a1_3[j])?;
        }
        push("a2^1".into(), a.omega_a2_1, &self.e2, &a.diag_a2_1)?;
        for j in 0..self.input_dim() {
            push(format!("a2^2[{j}]"), a.omega_a2_2[j], &self.e2, &a.diag_a2_2[j])?;
        }
        for j in 0..self.input_dim() {
            push(format!("d1^1[{j}]"), a.omega_d1_1[j], &self.f1[j], &ones)?;
            push(format!("d1^2[{j}]"), a.omega_d1_2[j], &self.f1[j], &a.diag_d1_2[j])?;
        }
        for j in 0..self.input_dim() {
            push(format!("d2^1[{j}]"), a.omega_d2_1[j], &self.f2[j], &a.diag_d2_1[j])?;
            push(format!("d2^2[{j}]"), a.omega_d2_2[j], &self.f2[j], &ones)?;
        }
        for j in 0..self.input_dim() {
            if let Some(g) = &self.g[j] {
                push(format!("q[{j}]"), a.omega_q[j], g, &ones)?;
            }
        }
        let residual = self.resid.norm_squared() / nf;
        let total = pen.iter().fold(residual, |acc, (_, v)| acc + v);
        Ok(SepLoss {
            total,
            residual,
            penalties: pen,
        })
    }

    /// The separated loss at the cached iterate.
    pub fn loss(&self) -> SepLoss {
        self.named_loss(&self.assembly()).expect("cached shapes are consistent")
    }

    // -- aggregated weights --------------------------------------------------

    fn weights_with(&self, s: &Scales) -> Weights {
        let d_in = self.input_dim();
        let n = self.ds.len();
        let nm = &self.norms;
        let (w2, w3) = (s.w2, s.w3);
        let mut p1 = DVector::from_element(n, s.kk);
        let mut p2 = DVector::zeros(n);
        let mut p3 = DVector::from_element(n, s.kk);
        let mut p4 = DVector::zeros(n);
        let mut beta1 = Vec::with_capacity(d_in);
        let mut beta2 = Vec::with_capacity(d_in);
        for j in 0..d_in {
            let (kf, ks, v) = (s.kf[j], s.ks[j], s.v[j]);
            let (d1, d2, q) = (&nm.d1[j], &nm.d2[j], &nm.q[j]);
            let d12 = d1 + d2;
            p1 += &d12 * kf + (q + d1.component_mul(d2) + d1 * v) * ks;
            p2 += &d12 * (ks * v);
            p3 += d2 * kf + q * ks;
            p4 += d2 * (ks * v);
            beta1.push((d12 * ks).add_scalar(kf + ks * v) * (w3 * w2) + DVector::from_element(n, w3 * w2 * w2 * ks * v));
            beta2.push((d2 * ks).add_scalar(kf + w2 * ks * v) * w3);
        }
        Weights {
            alpha1: (p1 + p2 * w2) * (w3 * w2),
            alpha2: (p3 + p4 * w2) * w3,
            beta1,
            beta2,
            omega_q: s.ks.iter().map(|ks| w3 * ks).collect(),
        }
    }

    fn weights(&self) -> Weights {
        self.weights_with(&self.scales())
    }

    /// Penalty sum (times `N`) for given weights.
    fn penalty_sum(&self, w: &Weights) -> f64 {
        let mut acc = w.alpha1.dot(&self.n_e1) + w.alpha2.dot(&self.n_e2);
        for j in 0..self.input_dim() {
            acc += w.beta1[j].dot(&self.n_f1[j]) + w.beta2[j].dot(&self.n_f2[j]) + w.omega_q[j] * self.n_g[j];
        }
        acc
    }

    /// `J_S` from the aggregated weights; equals [`SepState::loss`] up to
    /// rounding.
    pub fn aggregated_loss(&self) -> f64 {
        (self.resid.norm_squared() + self.penalty_sum(&self.weights())) / self.ds.len() as f64
    }

    // -- gradients -----------------------------------------------------------

    /// Gradient of `J_S` with respect to `var`. `W1Col(j)` yields an
    /// `M × 1` matrix.
    pub fn gradient(&self, var: Var, conv: GradientConvention) -> Result<DMatrix<f64>> {
        let d_in = self.input_dim();
        let check = |j: usize| -> Result<()> {
            if j >= d_in {
                return Err(Error::Index {
                    what: "input coordinate",
                    index: j,
                    len: d_in,
                });
            }
            Ok(())
        };
        let s = self.scales();
        let w = self.weights_with(&s);
        let full = conv == GradientConvention::Full;
        let t = self.terms();
        let w2t = self.p.w2.transpose();
        let nf = self.ds.len() as f64;
        let g = match var {
            Var::W1Col(j) => {
                check(j)?;
                let e1a = scale_cols(&self.e1, &w.alpha1);
                let mut g = &e1a * self.ds.x.row(j).transpose() * 2.0;
                g += scale_cols(&self.f1[j], &w.beta1[j]).column_sum() * 2.0;
                if full {
                    g += self.p.w1.column(j) * (2.0 * self.partial_v(j, &s));
                }
                DMatrix::from_column_slice(g.len(), 1, g.as_slice())
            }
            Var::A1 => {
                let mut g = scale_cols(&self.e1, &w.alpha1) * -2.0;
                g += self.s1[1].component_mul(&(&w2t * scale_cols(&self.e2, &w.alpha2))) * 2.0;
                for j in 0..d_in {
                    let d1 = &self.aux.d1[j];
                    g += self.s1[2].component_mul(d1).component_mul(&(&w2t * scale_cols(&self.f2[j], &w.beta2[j]))) * 2.0;
                    if let Some(gj) = &self.g[j] {
                        g += self.s1[3].component_mul(d1).component_mul(d1).component_mul(&(&w2t * gj))
                            * (2.0 * w.omega_q[j]);
                    }
                }
                g
            }
            Var::D1(j) => {
                check(j)?;
                let d1 = &self.aux.d1[j];
                let mut g = scale_cols(&self.f1[j], &w.beta1[j]) * -2.0;
                g += self.s1[1].component_mul(&(&w2t * scale_cols(&self.f2[j], &w.beta2[j]))) * 2.0;
                if let Some(gj) = &self.g[j] {
                    g += self.s1[2].component_mul(d1).component_mul(&(&w2t * gj)) * (4.0 * w.omega_q[j]);
                }
                if full {
                    g += scale_cols(d1, &self.partial_d1(j, &s)) * 2.0;
                }
                g
            }
            Var::W2 => {
                let mut g = scale_cols(&self.e2, &w.alpha2) * self.s1[0].transpose() * 2.0;
                for j in 0..d_in {
                    g += scale_cols(&self.f2[j], &w.beta2[j]) * self.p2[j].transpose() * 2.0;
                    if let (Some(gj), Some(p3)) = (&self.g[j], &self.p3[j]) {
                        g += gj * p3.transpose() * (2.0 * w.omega_q[j]);
                    }
                }
                if full {
                    g += &self.p.w2 * (2.0 * self.partial_w2(&s));
                }
                g
            }
            Var::A2 => {
                let r = &self.resid;
                let w3 = &self.p.w3;
                let mut g = outer(w3, &r.component_mul(&t.phi)).component_mul(&self.s2[1]);
                for j in 0..d_in {
                    let d2 = &self.aux.d2[j];
                    g += outer(w3, &r.component_mul(&t.first[j])).component_mul(&self.s2[2]).component_mul(d2);
                    if let (Some(ks), Some(q)) = (&t.second[j], &self.aux.q[j]) {
                        let inner = self.s2[3].component_mul(d2).component_mul(d2) + self.s2[2].component_mul(q);
                        g += outer(w3, &r.component_mul(ks)).component_mul(&inner);
                    }
                }
                g * 2.0 - scale_cols(&self.e2, &w.alpha2) * 2.0
            }
            Var::D2(j) => {
                check(j)?;
                let r = &self.resid;
                let w3 = &self.p.w3;
                let d2 = &self.aux.d2[j];
                let mut g = outer(w3, &r.component_mul(&t.first[j])).component_mul(&self.s2[1]) * 2.0;
                if let Some(ks) = &t.second[j] {
                    g += outer(w3, &r.component_mul(ks)).component_mul(&self.s2[2]).component_mul(d2) * 4.0;
                }
                g -= scale_cols(&self.f2[j], &w.beta2[j]) * 2.0;
                if full {
                    g += scale_cols(d2, &self.partial_d2(j, &s)) * 2.0;
                }
                g
            }
            Var::Q(j) => {
                check(j)?;
                let (Some(q), Some(gj), Some(ks)) = (&self.aux.q[j], &self.g[j], &t.second[j]) else {
                    return Err(Error::KindMismatch(format!("no q[{j}] for a {} problem", self.ds.kind)));
                };
                let mut g = outer(&self.p.w3, &self.resid.component_mul(ks)).component_mul(&self.s2[1]) * 2.0;
                g -= gj * (2.0 * w.omega_q[j]);
                if full {
                    g += scale_cols(q, &self.partial_q(j, &s)) * 2.0;
                }
                g
            }
        };
        Ok(g / nf)
    }

    /// `∂(N·J_S)/∂‖d1j[n]‖²` per column.
    fn partial_d1(&self, j: usize, s: &Scales) -> DVector<f64> {
        let (w2, w3, kf, ks, v) = (s.w2, s.w3, s.kf[j], s.ks[j], s.v[j]);
        let d2 = &self.norms.d2[j];
        let coef_e1 = (d2 * ks).add_scalar(kf + ks * v) * (w3 * w2) + DVector::from_element(d2.len(), w3 * w2 * w2 * ks * v);
        self.n_e1.component_mul(&coef_e1) + &self.n_f1[j] * (w3 * w2 * ks)
    }

    fn partial_d2(&self, j: usize, s: &Scales) -> DVector<f64> {
        let (w2, w3, kf, ks, v) = (s.w2, s.w3, s.kf[j], s.ks[j], s.v[j]);
        let d1 = &self.norms.d1[j];
        let coef_e1 = (d1 * ks).add_scalar(kf + w2 * ks * v) * (w3 * w2);
        self.n_e1.component_mul(&coef_e1)
            + &self.n_e2 * (w3 * (kf + w2 * ks * v))
            + &self.n_f1[j] * (w3 * w2 * ks)
            + &self.n_f2[j] * (w3 * ks)
    }

    fn partial_q(&self, j: usize, s: &Scales) -> DVector<f64> {
        let (w2, w3, ks) = (s.w2, s.w3, s.ks[j]);
        &self.n_e1 * (w3 * w2 * ks) + &self.n_e2 * (w3 * ks)
    }

    fn partial_v(&self, j: usize, s: &Scales) -> f64 {
        let (w2, w3, ks) = (s.w2, s.w3, s.ks[j]);
        if ks == 0.0 {
            return 0.0;
        }
        let (d1, d2) = (&self.norms.d1[j], &self.norms.d2[j]);
        let coef_e1 = (d1 * w2 + (d1 + d2) * (w2 * w2)) * (w3 * ks);
        self.n_e1.dot(&coef_e1)
            + self.n_e2.dot(d2) * (w3 * w2 * ks)
            + self.n_f1[j].sum() * (w3 * (w2 + w2 * w2) * ks)
            + self.n_f2[j].sum() * (w3 * w2 * ks)
    }

    fn partial_w2(&self, s: &Scales) -> f64 {
        let (w2, w3) = (s.w2, s.w3);
        let n = self.ds.len();
        let nm = &self.norms;
        let mut p1 = DVector::from_element(n, s.kk);
        let mut p2 = DVector::zeros(n);
        let mut p4 = DVector::zeros(n);
        let mut acc = 0.0;
        for j in 0..self.input_dim() {
            let (kf, ks, v) = (s.kf[j], s.ks[j], s.v[j]);
            let (d1, d2, q) = (&nm.d1[j], &nm.d2[j], &nm.q[j]);
            let d12 = d1 + d2;
            p1 += &d12 * kf + (q + d1.component_mul(d2) + d1 * v) * ks;
            p2 += &d12 * (ks * v);
            p4 += d2 * (ks * v);
            let coef_f1 = (&d12 * ks).add_scalar(kf + ks * v + 2.0 * w2 * ks * v);
            acc += w3 * (self.n_f1[j].dot(&coef_f1) + ks * v * self.n_f2[j].sum());
        }
        acc + w3 * (self.n_e1.dot(&(p1 + p2 * (2.0 * w2))) + self.n_e2.dot(&p4))
    }

    // -- closed-form pieces ----------------------------------------------------

    /// `B` with `R = W3·B + K·b3 − Y`.
    pub(crate) fn output_design(&self) -> DMatrix<f64> {
        let t = self.terms();
        let mut b = scale_cols(&self.s2[0], &t.phi.transpose());
        for j in 0..self.input_dim() {
            b += scale_cols(&self.inner1[j], &t.first[j].transpose());
            if let (Some(ks), Some(inner)) = (&t.second[j], &self.inner2[j]) {
                b += scale_cols(inner, &ks.transpose());
            }
        }
        b
    }

    /// Penalty sum (times `N`) with the `‖W3‖²` factor divided out.
    pub fn ridge_lambda(&self) -> f64 {
        let mut s = self.scales();
        s.w3 = 1.0;
        self.penalty_sum(&self.weights_with(&s))
    }

    /// Column weights of the `b1` and `b2` least-squares problems.
    pub(crate) fn bias_weights(&self) -> (DVector<f64>, DVector<f64>) {
        let mut s = self.scales();
        s.w3 = 1.0;
        let w = self.weights_with(&s);
        let w2 = s.w2;
        let b1 = if w2 > 0.0 { w.alpha1 / w2 } else { self.bias1_weights_no_w2(&s) };
        (b1, w.alpha2)
    }

    /// Limit of `α1/(‖W3‖²‖W2‖²)` at `W2 = 0`.
    fn bias1_weights_no_w2(&self, s: &Scales) -> DVector<f64> {
        let n = self.ds.len();
        let mut p1 = DVector::from_element(n, s.kk);
        for j in 0..self.input_dim() {
            let (d1, d2, q) = (&self.norms.d1[j], &self.norms.d2[j], &self.norms.q[j]);
            p1 += (d1 + d2) * s.kf[j] + (q + d1.component_mul(d2) + d1 * s.v[j]) * s.ks[j];
        }
        p1
    }

    pub(crate) fn bias1_target(&self) -> DMatrix<f64> {
        &self.aux.a1 - &self.w1x
    }

    pub(crate) fn bias2_target(&self) -> DMatrix<f64> {
        &self.aux.a2 - &self.w2s1
    }
}

/// Gradient of `J_S` at `(p, aux)` built from scratch.
pub fn lysep_gradient(
    p: &NetworkParams,
    aux: &AuxState,
    act: &ActivationBundle,
    ds: &Dataset,
    var: Var,
    conv: GradientConvention,
) -> Result<DMatrix<f64>> {
    SepState::new(p.clone(), aux.clone(), act, ds)?.gradient(var, conv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::make_sin_activation;
    use crate::network::init_params;
    use crate::problems::manufactured_problem;
    use crate::sampling::halton_ball;
    use std::sync::Arc;

    #[test]
    fn weighted_norm_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(weighted_norm_sq(&a, &DVector::from_vec(vec![2.0, 1.0])).unwrap(), 60.0);
        assert_eq!(weighted_norm_sq(&a, &DVector::from_element(2, 1.0)).unwrap(), a.norm_squared());
        assert_eq!(weighted_norm_sq(&DMatrix::zeros(2, 2), &DVector::from_vec(vec![3.0, 1.0])).unwrap(), 0.0);
        assert!(weighted_norm_sq(&a, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn unit_scale_assembly() {
        let prob = crate::problems::PdeProblem {
            name: "unit".into(),
            kind: PdeKind::Elliptic,
            dim: 1,
            horizon: 0.0,
            coeff_c: Arc::new(|_| 1.0),
            grad_c: Some(Arc::new(|x: &[f64]| vec![0.0; x.len()])),
            source: Arc::new(|_, _| 0.0),
            true_solution: None,
        };
        let ds = Dataset::new(&prob, DMatrix::zeros(1, 1), RowDVector::zeros(1)).unwrap();
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = NetworkParams {
            w1: one.clone(),
            b1: DVector::from_element(1, 1.0),
            w2: one.clone(),
            b2: DVector::from_element(1, 1.0),
            w3: RowDVector::from_element(1, 1.0),
            b3: 1.0,
        };
        let aux = AuxState {
            a1: one.clone(),
            a2: one.clone(),
            d1: vec![one.clone()],
            d2: vec![one.clone()],
            q: vec![Some(one)],
        };
        let a = assemble_penalties(&p, &aux, &ds).unwrap();
        assert_eq!(a.omega_a1_1, 1.0);
        assert_eq!(a.omega_a1_2, vec![1.0]);
        assert_eq!(a.omega_a1_3, vec![1.0]);
        assert_eq!(a.diag_a1_2[0][0], 1.0);
        assert_eq!(a.diag_a1_3[0][0], 2f64.sqrt());
        assert_eq!(a, assemble_penalties(&p, &aux, &ds).unwrap());
    }

    fn small() -> (Dataset, NetworkParams) {
        let prob = manufactured_problem("elliptic2d").unwrap();
        let x = halton_ball(2, 4, 0).unwrap();
        let y = prob.source_row(&x).unwrap();
        (Dataset::new(&prob, x, y).unwrap(), init_params(3, 2, 5))
    }

    #[test]
    fn zero_output_layer_kills_weights() {
        let (ds, mut p) = small();
        p.w3.fill(0.0);
        let aux = AuxState::zeros(PdeKind::Elliptic, 2, 3, 4);
        let a = assemble_penalties(&p, &aux, &ds).unwrap();
        assert_eq!(a.omega_a1_1, 0.0);
        assert_eq!(a.omega_a2_1, 0.0);
        assert!(a.omega_a1_2.iter().chain(&a.omega_d1_2).chain(&a.omega_q).all(|w| *w == 0.0));
    }

    #[test]
    fn zero_everything_gives_source_norm() {
        let (ds, _) = small();
        let p = NetworkParams::zeros(3, 2);
        let aux = AuxState::zeros(PdeKind::Elliptic, 2, 3, 4);
        let l = lysep_loss_auto(&p, &aux, &make_sin_activation(), &ds).unwrap();
        assert_eq!(l.total, ds.y.norm_squared() / 4.0);
        assert_eq!(l.penalty_sum(), 0.0);
    }

    #[test]
    fn feasible_point_has_no_penalty() {
        let (ds, p) = small();
        let act = make_sin_activation();
        let aux = feasible_aux(&p, &act, &ds).unwrap();
        let l = lysep_loss_auto(&p, &aux, &act, &ds).unwrap();
        assert!(l.penalties.iter().all(|(_, v)| *v == 0.0));
        for j in 0..2 {
            assert!(aux.d1[j].column_iter().all(|c| c == p.w1.column(j)));
        }
    }

    #[test]
    fn consistency_report() {
        let r = check_consistency(1.0, 1.0, 2, PdeKind::Elliptic, 14.0);
        assert_eq!((r.factor, r.bound, r.ok), (6.0, 84.0, true));
        assert!(check_consistency(0.0, 0.0, 5, PdeKind::Hyperbolic, 14.0).ok);
        assert!(!check_consistency(1.0, 1e-3, 5, PdeKind::Parabolic, 14.0).ok);
        assert_eq!(check_consistency(0.0, 1.0, 5, PdeKind::Parabolic, 1.0).factor, 13.0);
        assert_eq!(check_consistency(0.0, 1.0, 5, PdeKind::Hyperbolic, 1.0).factor, 14.0);
    }

    #[test]
    fn aux_validation() {
        let mut aux = AuxState::zeros(PdeKind::Parabolic, 2, 3, 4);
        assert!(aux.q[0].is_none() && aux.q[1].is_some());
        assert!(aux.validate(PdeKind::Parabolic, 3, 4, 3).is_ok());
        assert!(aux.validate(PdeKind::Hyperbolic, 3, 4, 3).is_err());
        aux.a1 = DMatrix::zeros(2, 4);
        assert!(aux.validate(PdeKind::Parabolic, 3, 4, 3).is_err());
    }
}
