//! Small dense helpers shared by the loss assemblies.

use nalgebra::{Cholesky, DMatrix, DVector, RowDVector, SVD};

/// `A + v·1ᵀ`.
pub fn add_col_broadcast(a: &DMatrix<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for mut col in out.column_iter_mut() {
        col += v;
    }
    out
}

/// `v·1ᵀ` with `n` columns.
pub fn replicate_col(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(v.len(), n, |m, _| v[m])
}

/// Scales column `n` of `a` by `w[n]`.
pub fn scale_cols(a: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for (n, mut col) in out.column_iter_mut().enumerate() {
        col *= w[n];
    }
    out
}

/// Scales row `m` of `a` by `v[m]`.
pub fn scale_rows(a: &DMatrix<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for mut col in out.column_iter_mut() {
        col.component_mul_assign(v);
    }
    out
}

/// Squared Euclidean norm of every column.
pub fn col_norms_sq(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(a.ncols(), a.column_iter().map(|c| c.norm_squared()))
}

/// `w ∘ r` as a column-broadcast outer product `w ⊗ r` (M×N) for a row `r`.
pub fn outer(w: &RowDVector<f64>, r: &RowDVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(w.len(), r.len(), |m, n| w[m] * r[n])
}

pub fn row_inf_norm(r: &RowDVector<f64>) -> f64 {
    r.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Solves the symmetric positive (semi)definite system `X·A = rhs` for a row
/// `X`. Falls back to a minimum-norm least-squares solve when the Cholesky
/// factorization fails.
pub fn solve_spd_row(a: DMatrix<f64>, rhs: &RowDVector<f64>) -> Option<RowDVector<f64>> {
    if !a.iter().chain(rhs.iter()).all(|v| v.is_finite()) {
        return None;
    }
    let b = rhs.transpose();
    let sol = match Cholesky::new(a.clone()) {
        Some(ch) => ch.solve(&b),
        None => {
            let svd = SVD::try_new(a, true, true, f64::EPSILON, 10_000)?;
            let tol = f64::EPSILON * svd.singular_values.max() * (b.len() as f64);
            svd.solve(&b, tol).ok()?
        }
    };
    if sol.iter().all(|v| v.is_finite()) {
        Some(sol.transpose())
    } else {
        None
    }
}

/// Ridge least squares for a row: minimizes `‖x·B − t‖² + λ‖x‖²` through a
/// thin SVD of `Bᵀ`, which avoids forming `B·Bᵀ`. For `λ = 0` singular values
/// below the rank tolerance are dropped, giving the minimum-norm solution.
/// Also returns the numerical rank of `B`.
pub fn ridge_solve_row(b: &DMatrix<f64>, t: &RowDVector<f64>, lambda: f64) -> Option<(RowDVector<f64>, usize)> {
    if !b.iter().chain(t.iter()).all(|v| v.is_finite()) || !(lambda >= 0.0 && lambda.is_finite()) {
        return None;
    }
    let svd = SVD::try_new(b.transpose(), true, true, f64::EPSILON, 10_000)?;
    let (u, v_t) = (svd.u?, svd.v_t?);
    let s = &svd.singular_values;
    let tol = f64::EPSILON * s.max() * b.nrows().max(b.ncols()) as f64;
    let ut_t = u.transpose() * t.transpose();
    let mut coef = DVector::zeros(s.len());
    let rank = s.iter().filter(|v| **v > tol).count();
    for k in 0..s.len() {
        let denom = s[k] * s[k] + lambda;
        if s[k] > tol || (lambda > 0.0 && denom > 0.0) {
            coef[k] = s[k] * ut_t[k] / denom;
        }
    }
    let x = v_t.transpose() * coef;
    x.iter().all(|v| v.is_finite()).then(|| (x.transpose(), rank))
}
