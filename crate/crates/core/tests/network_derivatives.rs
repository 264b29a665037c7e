mod common;

use common::{random_matrix, random_params, rng};
use lysep::network::{first_derivative, forward, second_derivative};
use lysep::{make_sin_activation, make_tanh_activation};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn shifted(x: &DMatrix<f64>, i: usize, h: f64) -> DMatrix<f64> {
    let mut y = x.clone();
    y.row_mut(i).add_scalar_mut(h);
    y
}

fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / b.abs().max(scale)
}

#[test]
fn derivatives_match_central_differences() {
    for (act, seed0) in [(make_sin_activation(), 0u64), (make_tanh_activation(), 50)] {
        for draw in 0..24u64 {
            let mut r = rng(seed0 + draw);
            let m = 3 + (draw % 3) as usize;
            let n = 4 + (draw % 5) as usize;
            let d_in = 2 + (draw % 2) as usize;
            let p = random_params(&mut r, m, d_in, 1.0);
            let x = random_matrix(&mut r, d_in, n, 0.7);
            let trace = forward(&p, &act, &x).unwrap();
            let out = |y: &DMatrix<f64>| forward(&p, &act, y).unwrap().out;
            let scale = 1e-3 * trace.out.amax().max(1e-3);
            for i in 0..d_in {
                let g = first_derivative(&p, &act, &trace, i).unwrap();
                let hh = second_derivative(&p, &act, &trace, i).unwrap();
                let h1 = 1e-5;
                let fd1 = (out(&shifted(&x, i, h1)) - out(&shifted(&x, i, -h1))) / (2.0 * h1);
                let h2 = 1e-2;
                let fd2 = (out(&shifted(&x, i, h2)) * 16.0 - out(&shifted(&x, i, 2.0 * h2)) - &trace.out * 30.0
                    + out(&shifted(&x, i, -h2)) * 16.0
                    - out(&shifted(&x, i, -2.0 * h2)))
                    / (12.0 * h2 * h2);
                for col in 0..n {
                    let e1 = rel_err(fd1[col], g[col], scale);
                    let e2 = rel_err(fd2[col], hh[col], scale);
                    assert!(e1 <= 1e-5, "{} draw {draw} i {i} col {col}: first {} vs {}", act.name, fd1[col], g[col]);
                    assert!(e2 <= 1e-4, "{} draw {draw} i {i} col {col}: second {} vs {}", act.name, fd2[col], hh[col]);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn output_is_permutation_equivariant_over_batch(seed in 0u64..1000, shift in 1usize..5) {
        let act = make_sin_activation();
        let mut r = rng(seed);
        let p = random_params(&mut r, 4, 2, 1.0);
        let x = random_matrix(&mut r, 2, 5, 1.0);
        let rolled = DMatrix::from_fn(2, 5, |i, j| x[(i, (j + shift) % 5)]);
        let a = forward(&p, &act, &x).unwrap().out;
        let b = forward(&p, &act, &rolled).unwrap().out;
        for j in 0..5 {
            prop_assert_eq!(b[j], a[(j + shift) % 5]);
        }
    }

    #[test]
    fn hidden_unit_permutation_leaves_output_unchanged(seed in 0u64..1000) {
        let act = make_sin_activation();
        let mut r = rng(seed);
        let p = random_params(&mut r, 4, 2, 1.0);
        let x = random_matrix(&mut r, 2, 6, 1.0);
        let perm = [2usize, 0, 3, 1];
        let mut q = p.clone();
        for (k, &src) in perm.iter().enumerate() {
            q.w1.set_row(k, &p.w1.row(src));
            q.b1[k] = p.b1[src];
        }
        for a in 0..4 {
            for (k, &src) in perm.iter().enumerate() {
                q.w2[(a, k)] = p.w2[(a, src)];
            }
        }
        let a = forward(&p, &act, &x).unwrap().out;
        let b = forward(&q, &act, &x).unwrap().out;
        prop_assert!((a - b).amax() <= 1e-13);
    }
}
