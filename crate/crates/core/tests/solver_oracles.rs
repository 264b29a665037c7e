mod common;

use common::{perturbed_aux, problem_and_data, random_matrix, random_params, rng, KINDS};
use lysep::lysep::{feasible_aux, lysep_loss_auto, AuxState, SepState};
use lysep::network::NetworkParams;
use lysep::pinn::Dataset;
use lysep::solver::{gd_step, iterate, solve_b1, solve_b2, solve_b3, solve_w3, BiasSolve, SolverConfig, Step, StepRule};
use lysep::{make_sin_activation, GradientConvention, Var};
use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;
use std::sync::Arc;

fn loss(p: &NetworkParams, aux: &AuxState, ds: &Dataset) -> f64 {
    lysep_loss_auto(p, aux, &make_sin_activation(), ds).unwrap().total
}

/// A random off-feasible point of moderate size.
fn random_state(name: &str, seed: u64, m: usize, n: usize) -> (NetworkParams, AuxState, Dataset) {
    let (_, ds) = problem_and_data(name, n, seed * 7);
    let mut r = rng(seed);
    let p = random_params(&mut r, m, ds.input_dim(), 0.8);
    let base = feasible_aux(&p, &make_sin_activation(), &ds).unwrap();
    let aux = perturbed_aux(&mut r, &base, 0.05);
    (p, aux, ds)
}

fn assert_no_descent(name: &str, what: &str, f0: f64, trials: impl Iterator<Item = f64>) {
    for (k, f) in trials.enumerate() {
        assert!(f >= f0 - 1e-12 * f0.abs().max(1e-300), "{name} {what} probe {k}: {f} < {f0}");
    }
}

fn unit_direction(r: &mut impl Rng, len: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[test]
fn closed_form_solves_are_minimizers() {
    let act = make_sin_activation();
    for name in KINDS {
        for seed in 0..3u64 {
            let (mut p, aux, ds) = random_state(name, seed, 4, 8);
            let mut r = rng(100 + seed);

            p.w3 = solve_w3(&p, &aux, &act, &ds, 0.0).unwrap();
            let f0 = loss(&p, &aux, &ds);
            assert_no_descent(name, "W3", f0, (0..50).map(|_| {
                let mut q = p.clone();
                let dir = unit_direction(&mut r, q.w3.len());
                for (w, d) in q.w3.iter_mut().zip(&dir) {
                    *w += 1e-4 * d;
                }
                loss(&q, &aux, &ds)
            }));

            let BiasSolve::Updated(b1) = solve_b1(&p, &aux, &act, &ds).unwrap() else { panic!("b1 degenerate") };
            p.b1 = b1;
            let f0 = loss(&p, &aux, &ds);
            assert_no_descent(name, "b1", f0, (0..50).map(|_| {
                let mut q = p.clone();
                q.b1 += DVector::from_vec(unit_direction(&mut r, q.b1.len())) * 1e-4;
                loss(&q, &aux, &ds)
            }));

            let BiasSolve::Updated(b2) = solve_b2(&p, &aux, &act, &ds).unwrap() else { panic!("b2 degenerate") };
            p.b2 = b2;
            let f0 = loss(&p, &aux, &ds);
            assert_no_descent(name, "b2", f0, (0..50).map(|_| {
                let mut q = p.clone();
                q.b2 += DVector::from_vec(unit_direction(&mut r, q.b2.len())) * 1e-4;
                loss(&q, &aux, &ds)
            }));

            let BiasSolve::Updated(b3) = solve_b3(&p, &aux, &act, &ds).unwrap() else { panic!("b3 degenerate") };
            p.b3 = b3;
            let st = SepState::new(p.clone(), aux.clone(), &act, &ds).unwrap();
            let r0 = st.loss().residual;
            for h in [1e-4, -1e-4] {
                let mut q = p.clone();
                q.b3 += h;
                let rq = SepState::new(q, aux.clone(), &act, &ds).unwrap().loss().residual;
                assert!(rq >= r0, "{name} b3 {h}: {rq} < {r0}");
            }
        }
    }
}

#[test]
fn w3_solve_with_square_design_interpolates() {
    // at a feasible point λ = 0; with M = N the solve fits Y exactly
    let act = make_sin_activation();
    let (_, ds) = problem_and_data("elliptic2d", 3, 5);
    let p = random_params(&mut rng(3), 3, 2, 0.9);
    let aux = feasible_aux(&p, &act, &ds).unwrap();
    let st = SepState::new(p.clone(), aux.clone(), &act, &ds).unwrap();
    assert_eq!(st.ridge_lambda(), 0.0);

    // rows of B read off the residual, which is affine in W3
    let resid_at = |w3: RowDVector<f64>| {
        let mut q = p.clone();
        q.w3 = w3;
        SepState::new(q, aux.clone(), &act, &ds).unwrap().residual().clone()
    };
    let offset = resid_at(RowDVector::zeros(3));
    let b = DMatrix::from_fn(3, 3, |k, n| {
        let mut e = RowDVector::zeros(3);
        e[k] = 1.0;
        resid_at(e)[n] - offset[n]
    });
    let direct = (b.transpose().lu().solve(&(-offset.transpose())).unwrap()).transpose();

    let w3 = solve_w3(&p, &aux, &act, &ds, 0.0).unwrap();
    assert!((&w3 - &direct).norm() <= 1e-8 * direct.norm(), "{w3} vs {direct}");
    let r = resid_at(w3).norm();
    assert!(r <= 1e-8 * offset.norm(), "residual {r}");
}

#[test]
fn w3_shrinks_to_zero_as_ridge_grows() {
    let act = make_sin_activation();
    let (p, aux, ds) = random_state("parabolic2d", 4, 4, 8);
    let norms: Vec<f64> = [0.0, 1e2, 1e4, 1e8, 1e12]
        .iter()
        .map(|r| solve_w3(&p, &aux, &act, &ds, *r).unwrap().norm())
        .collect();
    assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
    assert!(norms[4] < 1e-9 * norms[0]);
}

#[test]
fn ridge_parameter_is_nonnegative() {
    let act = make_sin_activation();
    for name in KINDS {
        for seed in 0..20u64 {
            let (p, aux, ds) = random_state(name, seed, 3, 5);
            let st = SepState::new(p, aux, &act, &ds).unwrap();
            assert!(st.ridge_lambda() >= 0.0);
        }
    }
}

#[test]
fn b3_examples() {
    let act = make_sin_activation();
    let (prob, ds) = problem_and_data("hyperbolic2d", 6, 0);
    let mut p = random_params(&mut rng(8), 3, 3, 0.5);
    let aux = feasible_aux(&p, &act, &ds).unwrap();

    // W3 = 0, Y = 2K
    p.w3 = RowDVector::zeros(3);
    let ds2 = Dataset::new(&prob, ds.x.clone(), &ds.terms.phi * 2.0).unwrap();
    assert_eq!(solve_b3(&p, &aux, &act, &ds2).unwrap(), BiasSolve::Updated(2.0));

    // Y = W3·B with b3 = 0
    let p = random_params(&mut rng(9), 3, 3, 0.5);
    let aux = feasible_aux(&p, &act, &ds).unwrap();
    let mut q = p.clone();
    q.b3 = 0.0;
    let zero_y = Dataset::new(&prob, ds.x.clone(), RowDVector::zeros(6)).unwrap();
    let wb = SepState::new(q, aux.clone(), &act, &zero_y).unwrap().residual().clone();
    let ds3 = Dataset::new(&prob, ds.x.clone(), wb).unwrap();
    let BiasSolve::Updated(b3) = solve_b3(&p, &aux, &act, &ds3).unwrap() else { panic!() };
    assert!(b3.abs() <= 1e-12, "{b3}");
}

#[test]
fn degenerate_weights_leave_biases_unchanged() {
    // c ≡ 0 makes every coefficient row vanish, so all bias weights are zero
    let act = make_sin_activation();
    let (mut prob, ds) = problem_and_data("elliptic2d", 5, 0);
    prob.coeff_c = Arc::new(|_| 0.0);
    prob.grad_c = Some(Arc::new(|x| vec![0.0; x.len()]));
    let ds = Dataset::new(&prob, ds.x.clone(), ds.y.clone()).unwrap();
    let p = random_params(&mut rng(1), 3, 2, 0.5);
    let aux = perturbed_aux(&mut rng(2), &feasible_aux(&p, &act, &ds).unwrap(), 0.1);
    assert!(matches!(solve_b1(&p, &aux, &act, &ds).unwrap(), BiasSolve::Unchanged(_)));
    assert!(matches!(solve_b2(&p, &aux, &act, &ds).unwrap(), BiasSolve::Unchanged(_)));
    assert!(matches!(solve_b3(&p, &aux, &act, &ds).unwrap(), BiasSolve::Unchanged(_)));
}

#[test]
fn gd_step_with_zero_rate_is_identity() {
    let act = make_sin_activation();
    let (p, aux, ds) = random_state("hyperbolic2d", 2, 3, 4);
    assert_eq!(gd_step(Var::A1, &p, &aux, &act, &ds, 0.0, GradientConvention::Full).unwrap(), aux.a1);
    assert_eq!(gd_step(Var::W2, &p, &aux, &act, &ds, 0.0, GradientConvention::Full).unwrap(), p.w2);
    assert_eq!(gd_step(Var::Q(0), &p, &aux, &act, &ds, 0.0, GradientConvention::Full).unwrap(), *aux.q[0].as_ref().unwrap());
    let stepped = gd_step(Var::A2, &p, &aux, &act, &ds, 1e-3, GradientConvention::Full).unwrap();
    assert!((&stepped - &aux.a2).norm() > 0.0);
}

#[test]
fn zero_rate_iteration_never_increases_the_loss() {
    let act = make_sin_activation();
    let cfg = SolverConfig { lr: 0.0, ..Default::default() };
    for name in KINDS {
        for seed in 0..10u64 {
            let (p, aux, ds) = random_state(name, seed, 4, 6);
            let mut st = SepState::new(p, aux, &act, &ds).unwrap();
            let before = st.aggregated_loss();
            iterate(&mut st, &cfg, 0, 1, &mut Vec::new()).unwrap();
            let after = st.aggregated_loss();
            assert!(after <= before * (1.0 + 1e-12), "{name} seed {seed}: {before} -> {after}");
        }
    }
}

#[test]
fn backtracking_iterations_are_monotone() {
    let act = make_sin_activation();
    let cfg = SolverConfig { lr: 1e-2, step_rule: StepRule::Backtracking, ..Default::default() };
    for name in KINDS {
        let (p, aux, ds) = random_state(name, 3, 5, 10);
        let mut st = SepState::new(p, aux, &act, &ds).unwrap();
        let mut prev = st.aggregated_loss();
        for k in 0..5 {
            iterate(&mut st, &cfg, k, 1, &mut Vec::new()).unwrap();
            let f = st.aggregated_loss();
            assert!(f <= prev * (1.0 + 1e-12), "{name} iter {k}: {prev} -> {f}");
            prev = f;
        }
    }
}

#[test]
fn incremental_state_equals_fresh_state() {
    let act = make_sin_activation();
    for rule in [StepRule::Fixed, StepRule::Backtracking] {
        let cfg = SolverConfig { lr: 1e-4, step_rule: rule, ..Default::default() };
        for name in KINDS {
            let (p, aux, ds) = random_state(name, 5, 4, 6);
            let mut st = SepState::new(p, aux, &act, &ds).unwrap();
            iterate(&mut st, &cfg, 0, 3, &mut Vec::new()).unwrap();
            let fresh = SepState::new(st.p.clone(), st.aux.clone(), &act, &ds).unwrap();
            assert!(st == fresh, "{name} {rule:?}: cached products drifted from a fresh build");
        }
    }
}

#[test]
fn update_order_is_the_documented_sweep() {
    use Step::*;
    let act = make_sin_activation();
    let cfg = SolverConfig::default();
    let expected = [
        vec![W1Col(0), W1Col(1), B1, A1, D1(0), D1(1), W2, B2, A2, D2(0), D2(1), Q(0), Q(1), W3, B3],
        vec![
            W1Col(0), W1Col(1), W1Col(2), B1, A1, D1(0), D1(1), D1(2), W2, B2, A2, D2(0), D2(1), D2(2), Q(1), Q(2), W3,
            B3,
        ],
        vec![
            W1Col(0), W1Col(1), W1Col(2), B1, A1, D1(0), D1(1), D1(2), W2, B2, A2, D2(0), D2(1), D2(2), Q(0), Q(1), Q(2),
            W3, B3,
        ],
    ];
    for (name, want) in KINDS.iter().zip(expected) {
        let (p, aux, ds) = random_state(name, 0, 3, 4);
        let mut st = SepState::new(p, aux, &act, &ds).unwrap();
        let mut trace = Vec::new();
        iterate(&mut st, &cfg, 0, 2, &mut trace).unwrap();
        let doubled: Vec<Step> = want.iter().chain(want.iter()).copied().collect();
        assert_eq!(trace, doubled, "{name}");
    }
}

#[test]
fn random_matrix_helper_is_seeded() {
    assert_eq!(random_matrix(&mut rng(1), 2, 2, 1.0), random_matrix(&mut rng(1), 2, 2, 1.0));
}
