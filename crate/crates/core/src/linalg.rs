//! Small dense-matrix helpers shared across the solvers.
//!
//! Everything here operates on `nalgebra::DMatrix<f64>` at the tiny sizes
//! this crate deals in (2n ≤ 6, k ≤ 2), so clarity wins over blocking or
//! allocation tricks. The one exception is [`pairwise_sum`], which is the
//! reduction primitive every Monte Carlo mean in the crate goes through:
//! its result depends only on the order of the input slice, never on how
//! many workers produced it.

use nalgebra::{DMatrix, DVector};

/// Entrywise maximum absolute value (the max norm used for all the
/// coefficient-table and Riccati bounds).
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// `(M + M^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Max entrywise asymmetry `|M - M^T|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    max_abs(&(m - m.transpose()))
}

/// Smallest eigenvalue of a symmetric matrix (symmetrized first so callers
/// can pass nearly-symmetric inputs).
pub fn min_eig_sym(m: &DMatrix<f64>) -> f64 {
    let sym = symmetrize(m);
    sym.symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |acc, v| acc.min(*v))
}

/// Semidefiniteness tolerance scaled to the matrix magnitude.
pub fn psd_tolerance(m: &DMatrix<f64>) -> f64 {
    1e-10 * (1.0 + max_abs(m))
}

/// True iff every entry is finite.
pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Pairwise (cascade) summation. Deterministic for a fixed input order and
/// independent of any parallel split that produced the slice.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 32 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Sample mean and standard error (`std / sqrt(len)`) via pairwise sums.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let m = values.len();
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / m as f64;
    if m == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (m as f64 - 1.0);
    (mean, (var / m as f64).sqrt())
}

/// `x^T M x` over raw slices; no allocation. Column-major walk over the
/// matrix storage keeps this branch-light in the per-path hot loops.
pub fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let (rows, cols) = m.shape();
    debug_assert_eq!(rows, x.len());
    debug_assert_eq!(cols, x.len());
    let data = m.as_slice();
    let mut acc = 0.0;
    for c in 0..cols {
        let col = &data[c * rows..(c + 1) * rows];
        let mut col_acc = 0.0;
        for r in 0..rows {
            col_acc += col[r] * x[r];
        }
        acc += col_acc * x[c];
    }
    acc
}

/// `u^T M x` over raw slices; no allocation.
pub fn bilinear(m: &DMatrix<f64>, u: &[f64], x: &[f64]) -> f64 {
    let (rows, cols) = m.shape();
    debug_assert_eq!(rows, u.len());
    debug_assert_eq!(cols, x.len());
    let data = m.as_slice();
    let mut acc = 0.0;
    for c in 0..cols {
        let col = &data[c * rows..(c + 1) * rows];
        let mut col_acc = 0.0;
        for r in 0..rows {
            col_acc += col[r] * u[r];
        }
        acc += col_acc * x[c];
    }
    acc
}

/// `out = M v` over raw slices; no allocation.
pub fn matvec_into(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    let (rows, cols) = m.shape();
    debug_assert_eq!(cols, v.len());
    debug_assert_eq!(rows, out.len());
    let data = m.as_slice();
    out.fill(0.0);
    for c in 0..cols {
        let col = &data[c * rows..(c + 1) * rows];
        let vc = v[c];
        for r in 0..rows {
            out[r] += col[r] * vc;
        }
    }
}

/// `out += alpha * (M v)` over raw slices.
pub fn matvec_add_into(m: &DMatrix<f64>, v: &[f64], alpha: f64, out: &mut [f64]) {
    let (rows, cols) = m.shape();
    debug_assert_eq!(cols, v.len());
    debug_assert_eq!(rows, out.len());
    let data = m.as_slice();
    for c in 0..cols {
        let col = &data[c * rows..(c + 1) * rows];
        let vc = alpha * v[c];
        for r in 0..rows {
            out[r] += col[r] * vc;
        }
    }
}

/// Least-squares slope of `log(y)` against `log(x)`.
///
/// Used by the convergence-order fits; callers are expected to have
/// filtered out zero errors beforehand.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..xs.len() {
        num += (lx[i] - mx) * (ly[i] - my);
        den += (lx[i] - mx) * (lx[i] - mx);
    }
    num / den
}

/// Solve `A x = b` for symmetric positive-definite `A` via Cholesky.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|ch| ch.solve(b))
}

/// Euclidean norm of a slice.
pub fn slice_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Convert a slice into a `DVector`.
pub fn to_vector(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}
