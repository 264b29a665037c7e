//! Alternating minimization of the separated loss: `W3`, `b1`, `b2`, `b3`
//! are set by exact least-squares solves, everything else takes gradient
//! steps, in the order
//!
//! `W1(:,j) → b1 → a1 → d1j → W2 → b2 → a2 → d2j → qj → W3 → b3`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::activation::{theorem_constants, ActivationBundle};
use crate::error::{Error, Result};
use crate::linalg::ridge_solve_row;
use crate::lysep::{check_consistency, feasible_aux, AuxState, GradientConvention, SepState, Var};
use crate::network::{forward, NetworkParams};
use crate::pinn::{is_diverged, pinn_loss, Dataset, Divergence};
use crate::problems::{ansatz_value, PdeProblem};
use crate::sampling::{l2_relative_error, SampledSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub iters: usize,
    /// Gradient step `τ` at iteration 0.
    pub lr: f64,
    /// `τ_k = lr·lr_decay^k`.
    pub lr_decay: f64,
    /// Added to the ridge parameter of the `W3` normal equations.
    pub ridge_floor: f64,
    pub log_every: usize,
    pub convention: GradientConvention,
    pub step_rule: StepRule,
}

/// How the gradient blocks choose their step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepRule {
    /// `x ← x − τ_k ∇x J_S` with the decaying schedule.
    Fixed,
    /// Per-block Armijo backtracking on `J_S`, starting from `τ_k` and then
    /// from twice the block's previous step. With a fixed `τ` the penalty
    /// weights, which scale with `‖W3‖²`, either blow the step up or drive
    /// `W3` to zero.
    #[default]
    Backtracking,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            iters: 2000,
            lr: 1e-3,
            lr_decay: 0.9995,
            ridge_floor: 1e-12,
            log_every: 100,
            convention: GradientConvention::Full,
            step_rule: StepRule::Backtracking,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("iters must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.ridge_floor >= 0.0 && self.ridge_floor.is_finite()) {
            return Err(Error::Config(format!("ridge_floor must be nonnegative, got {}", self.ridge_floor)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, k: usize) -> f64 {
        self.lr * self.lr_decay.powi(k as i32)
    }
}

/// One sub-update of an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Step {
    W1Col(usize),
    B1,
    A1,
    D1(usize),
    W2,
    B2,
    A2,
    D2(usize),
    Q(usize),
    W3,
    B3,
}

/// The sub-updates of one iteration, in order.
pub fn iteration_order(ds: &Dataset) -> Vec<Step> {
    let d_in = ds.input_dim();
    let mut s: Vec<Step> = (0..d_in).map(Step::W1Col).collect();
    s.extend([Step::B1, Step::A1]);
    s.extend((0..d_in).map(Step::D1));
    s.extend([Step::W2, Step::B2, Step::A2]);
    s.extend((0..d_in).map(Step::D2));
    s.extend((0..d_in).filter(|j| ds.kind.has_second(*j)).map(Step::Q));
    s.extend([Step::W3, Step::B3]);
    s
}

/// Result of a bias solve; degenerate weights leave the bias unchanged.
#[derive(Debug, Clone, PartialEq)]
pub enum BiasSolve<T> {
    Updated(T),
    Unchanged(&'static str),
}

fn weighted_row_average(target: &DMatrix<f64>, w: &DVector<f64>) -> BiasSolve<DVector<f64>> {
    let total = w.sum();
    if !(total > 0.0 && total.is_finite()) {
        return BiasSolve::Unchanged("bias weights sum to zero");
    }
    BiasSolve::Updated(target * w / total)
}

fn w3_from_state(st: &SepState, ridge_floor: f64) -> Result<RowDVector<f64>> {
    let b = st.output_design();
    let lambda = st.ridge_lambda() + ridge_floor;
    let target = &st.ds.y - &st.ds.terms.phi * st.p.b3;
    let (w3, rank) = ridge_solve_row(&b, &target, lambda).ok_or(Error::Singular)?;
    if lambda == 0.0 && rank < b.nrows() {
        return Err(Error::Singular);
    }
    Ok(w3)
}

fn b1_from_state(st: &SepState) -> BiasSolve<DVector<f64>> {
    weighted_row_average(&st.bias1_target(), &st.bias_weights().0)
}

fn b2_from_state(st: &SepState) -> BiasSolve<DVector<f64>> {
    weighted_row_average(&st.bias2_target(), &st.bias_weights().1)
}

/// `b3 = ⟨K, Y − W3·B⟩ / ‖K‖²`, written as a correction of the current `b3`.
fn b3_from_state(st: &SepState) -> BiasSolve<f64> {
    let k = &st.ds.terms.phi;
    let kk = k.norm_squared();
    if kk == 0.0 {
        return BiasSolve::Unchanged("K vanishes on the batch");
    }
    BiasSolve::Updated(st.p.b3 - k.dot(st.residual()) / kk)
}

/// Minimizer of the separated loss over `W3` with everything else fixed.
pub fn solve_w3(
    p: &NetworkParams,
    aux: &AuxState,
    act: &ActivationBundle,
    ds: &Dataset,
    ridge_floor: f64,
) -> Result<RowDVector<f64>> {
    w3_from_state(&SepState::new(p.clone(), aux.clone(), act, ds)?, ridge_floor)
}

pub fn solve_b1(p: &NetworkParams, aux: &AuxState, act: &ActivationBundle, ds: &Dataset) -> Result<BiasSolve<DVector<f64>>> {
    Ok(b1_from_state(&SepState::new(p.clone(), aux.clone(), act, ds)?))
}

pub fn solve_b2(p: &NetworkParams, aux: &AuxState, act: &ActivationBundle, ds: &Dataset) -> Result<BiasSolve<DVector<f64>>> {
    Ok(b2_from_state(&SepState::new(p.clone(), aux.clone(), act, ds)?))
}

pub fn solve_b3(p: &NetworkParams, aux: &AuxState, act: &ActivationBundle, ds: &Dataset) -> Result<BiasSolve<f64>> {
    Ok(b3_from_state(&SepState::new(p.clone(), aux.clone(), act, ds)?))
}

/// The variable `var` after one gradient step of size `lr`.
pub fn gd_step(
    var: Var,
    p: &NetworkParams,
    aux: &AuxState,
    act: &ActivationBundle,
    ds: &Dataset,
    lr: f64,
    conv: GradientConvention,
) -> Result<DMatrix<f64>> {
    let st = SepState::new(p.clone(), aux.clone(), act, ds)?;
    let g = st.gradient(var, conv)?;
    let current = match var {
        Var::W1Col(j) => DMatrix::from_column_slice(p.width(), 1, p.w1.column(j).as_slice()),
        Var::A1 => aux.a1.clone(),
        Var::D1(j) => aux.d1[j].clone(),
        Var::W2 => p.w2.clone(),
        Var::A2 => aux.a2.clone(),
        Var::D2(j) => aux.d2[j].clone(),
        Var::Q(j) => aux.q[j].clone().expect("gradient exists only where q does"),
    };
    Ok(current - g * lr)
}

fn step_var(step: Step) -> Option<Var> {
    match step {
        Step::W1Col(j) => Some(Var::W1Col(j)),
        Step::A1 => Some(Var::A1),
        Step::D1(j) => Some(Var::D1(j)),
        Step::W2 => Some(Var::W2),
        Step::A2 => Some(Var::A2),
        Step::D2(j) => Some(Var::D2(j)),
        Step::Q(j) => Some(Var::Q(j)),
        Step::B1 | Step::B2 | Step::W3 | Step::B3 => None,
    }
}

fn get_block(st: &SepState, var: Var) -> DMatrix<f64> {
    match var {
        Var::W1Col(j) => DMatrix::from_column_slice(st.p.width(), 1, st.p.w1.column(j).as_slice()),
        Var::A1 => st.aux.a1.clone(),
        Var::D1(j) => st.aux.d1[j].clone(),
        Var::W2 => st.p.w2.clone(),
        Var::A2 => st.aux.a2.clone(),
        Var::D2(j) => st.aux.d2[j].clone(),
        Var::Q(j) => st.aux.q[j].clone().expect("q exists where it is updated"),
    }
}

fn set_block(st: &mut SepState, var: Var, value: DMatrix<f64>) {
    match var {
        Var::W1Col(j) => {
            st.p.w1.set_column(j, &value.column(0));
            st.refresh_w1_col(j);
        }
        Var::A1 => {
            st.aux.a1 = value;
            st.refresh_a1();
        }
        Var::D1(j) => {
            st.aux.d1[j] = value;
            st.refresh_d1(j);
        }
        Var::W2 => {
            st.p.w2 = value;
            st.refresh_w2();
        }
        Var::A2 => {
            st.aux.a2 = value;
            st.refresh_a2();
        }
        Var::D2(j) => {
            st.aux.d2[j] = value;
            st.refresh_d2(j);
        }
        Var::Q(j) => {
            st.aux.q[j] = Some(value);
            st.refresh_q(j);
        }
    }
}

/// Mutable bookkeeping of a sweep: notes on degenerate solves and, for the
/// backtracking rule, the last accepted step of every block.
#[derive(Debug, Default)]
struct Sweep {
    notes: Vec<String>,
    /// Last step of each block and whether its first trial was accepted.
    steps: HashMap<Step, (f64, bool)>,
}

impl Sweep {
    /// Applies one sub-update to the cached state and refreshes what depends
    /// on it.
    fn apply(&mut self, st: &mut SepState, step: Step, lr: f64, cfg: &SolverConfig, iter: usize) -> Result<()> {
        if let Some(var) = step_var(step) {
            let g = st.gradient(var, cfg.convention)?;
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    var: format!("{var:?}"),
                    iter,
                });
            }
            let x0 = get_block(st, var);
            match cfg.step_rule {
                StepRule::Fixed => set_block(st, var, &x0 - &g * lr),
                StepRule::Backtracking => self.backtrack(st, step, var, x0, g, lr),
            }
            return Ok(());
        }
        match step {
            Step::B1 => match b1_from_state(st) {
                BiasSolve::Updated(b) => {
                    st.p.b1 = b;
                    st.refresh_e1();
                }
                BiasSolve::Unchanged(why) => self.notes.push(format!("iter {iter}: b1 unchanged ({why})")),
            },
            Step::B2 => match b2_from_state(st) {
                BiasSolve::Updated(b) => {
                    st.p.b2 = b;
                    st.refresh_e2();
                }
                BiasSolve::Unchanged(why) => self.notes.push(format!("iter {iter}: b2 unchanged ({why})")),
            },
            Step::W3 => {
                st.p.w3 = w3_from_state(st, cfg.ridge_floor)?;
                st.refresh_resid();
            }
            Step::B3 => match b3_from_state(st) {
                BiasSolve::Updated(b) => {
                    st.p.b3 = b;
                    st.refresh_resid();
                }
                BiasSolve::Unchanged(why) => self.notes.push(format!("iter {iter}: b3 unchanged ({why})")),
            },
            _ => unreachable!("gradient blocks handled above"),
        }
        Ok(())
    }

    /// Armijo backtracking from the block's last step, doubled when that step
    /// was accepted at once. When no trial decreases the loss the block is
    /// left unchanged and the next search starts below the smallest step
    /// tried.
    fn backtrack(&mut self, st: &mut SepState, step: Step, var: Var, x0: DMatrix<f64>, g: DMatrix<f64>, lr: f64) {
        let f0 = st.aggregated_loss();
        let gg = g.norm_squared();
        if gg == 0.0 {
            return;
        }
        let mut t = match self.steps.get(&step) {
            None => lr,
            Some(&(t, true)) => 2.0 * t,
            Some(&(t, false)) => t,
        };
        for trial in 0..MAX_BACKTRACKS {
            set_block(st, var, &x0 - &g * t);
            let f = st.aggregated_loss();
            if f.is_finite() && f <= f0 - ARMIJO * t * gg {
                self.steps.insert(step, (t, trial == 0));
                return;
            }
            t *= 0.5;
        }
        self.steps.insert(step, (t, false));
        set_block(st, var, x0);
    }
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 10;

/// Runs `iters` full iterations on a state, recording the sub-update order.
pub fn iterate(st: &mut SepState, cfg: &SolverConfig, first_iter: usize, iters: usize, trace: &mut Vec<Step>) -> Result<()> {
    let order = iteration_order(st.ds);
    let mut sweep = Sweep::default();
    for k in first_iter..first_iter + iters {
        let lr = cfg.lr_at(k);
        for step in &order {
            sweep.apply(st, *step, lr, cfg, k)?;
            trace.push(*step);
        }
    }
    Ok(())
}

/// One logged point of a trajectory. `bound` is `factor·C·J_S`; it is
/// absent when the activation has no consistency constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss_sep: Option<f64>,
    pub loss_orig: f64,
    pub bound: Option<f64>,
    pub bound_ok: Option<bool>,
    pub test_error: Option<f64>,
}

/// Relative ℓ² error of the ansatz on a test set.
pub fn test_error(prob: &PdeProblem, p: &NetworkParams, act: &ActivationBundle, test: &SampledSet) -> Result<f64> {
    let out = forward(p, act, &test.points)?.out;
    let psi = ansatz_value(prob, &out, &test.points)?;
    l2_relative_error(&psi, &test.values)
}

#[derive(Debug, Clone)]
pub struct LysepRun {
    pub params: NetworkParams,
    pub aux: AuxState,
    pub rows: Vec<LogRow>,
    pub diverged: Option<Divergence>,
    /// Why the run stopped early, if it did.
    pub failure: Option<String>,
    /// Sub-updates of the first iteration, in execution order.
    pub step_order: Vec<Step>,
    /// Degenerate solves that left a bias unchanged.
    pub notes: Vec<String>,
}

fn should_log(k: usize, cfg: &SolverConfig) -> bool {
    k.is_multiple_of(cfg.log_every) || k == cfg.iters
}

/// Minimizes the separated loss from `p0` with the auxiliaries initialized
/// at the feasible point. `observe` receives every logged row as it is
/// produced.
pub fn run_lysep(
    prob: &PdeProblem,
    p0: &NetworkParams,
    act: &ActivationBundle,
    ds: &Dataset,
    test: Option<&SampledSet>,
    cfg: &SolverConfig,
    mut observe: impl FnMut(&LogRow),
) -> Result<LysepRun> {
    cfg.validate()?;
    if prob.kind != ds.kind {
        return Err(Error::KindMismatch(format!("dataset is {}, problem is {}", ds.kind, prob.kind)));
    }
    let c = theorem_constants(act).ok().map(|t| t.c);
    let aux0 = feasible_aux(p0, act, ds)?;
    let mut st = SepState::new(p0.clone(), aux0, act, ds)?;
    let mut rows = Vec::new();
    let mut sweep = Sweep::default();
    let mut step_order = Vec::new();
    let order = iteration_order(ds);

    let make_row = |st: &SepState, k: usize| -> Result<LogRow> {
        let js = st.loss().total;
        let j = pinn_loss(prob, &st.p, act, ds)?;
        let report = c.map(|c| check_consistency(j, js, ds.dim, ds.kind, c));
        Ok(LogRow {
            iter: k,
            loss_sep: Some(js),
            loss_orig: j,
            bound: report.map(|r| r.bound),
            bound_ok: report.map(|r| r.ok),
            test_error: test.map(|t| test_error(prob, &st.p, act, t)).transpose()?,
        })
    };

    let row = make_row(&st, 0)?;
    observe(&row);
    rows.push(row);

    let mut diverged = None;
    let mut failure_reason = None;
    for k in 0..cfg.iters {
        let lr = cfg.lr_at(k);
        let mut failure = None;
        for step in &order {
            match sweep.apply(&mut st, *step, lr, cfg, k + 1) {
                Ok(()) => {}
                Err(e @ (Error::NonFiniteGradient { .. } | Error::Singular)) => {
                    failure = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
            if k == 0 {
                step_order.push(*step);
            }
        }
        let js = st.aggregated_loss();
        if failure.is_some() || is_diverged(js) {
            let value = if failure.is_some() { f64::NAN } else { js };
            let row = LogRow {
                iter: k + 1,
                loss_sep: Some(js),
                loss_orig: pinn_loss(prob, &st.p, act, ds).unwrap_or(f64::NAN),
                bound: None,
                bound_ok: None,
                test_error: None,
            };
            observe(&row);
            rows.push(row);
            diverged = Some(Divergence { iter: k + 1, value });
            failure_reason = Some(failure.unwrap_or_else(|| "separated loss left the finite range".into()));
            break;
        }
        if should_log(k + 1, cfg) {
            let row = make_row(&st, k + 1)?;
            observe(&row);
            rows.push(row);
        }
    }
    Ok(LysepRun {
        params: st.p,
        aux: st.aux,
        rows,
        diverged,
        failure: failure_reason,
        step_order,
        notes: sweep.notes,
    })
}
