//! Recursive cost evaluation.
//!
//! Drivers linear in `(y, z)` — everything the LQ problem needs — are solved
//! exactly (up to time discretization) through the representation
//! `y(0) = E[m(T) ξ + ∫ m(t) c(t) dt]`, where `m` is the exponential weight
//! process `dm = E m dt + F m dW`. Nonlinear toy drivers go through a
//! least-squares Monte Carlo backward solver with a quadratic polynomial
//! basis.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::scenario::{GeneralScenario, GeneralScenarioSet, LqScenarioSet};
use crate::sde::{simulate_general, simulate_lq, ControlPath, PathEnsemble, StatePaths};

/// The positive weight process `m` on every path and node, together with its
/// deterministic factor `m̃(t) = exp(∫ E ds)`.
#[derive(Debug, Clone)]
pub struct ExponentialProcess {
    pub paths: usize,
    pub nodes: usize,
    /// `m̃` at every node.
    pub det_factor: Vec<f64>,
    data: Vec<f64>,
}

impl ExponentialProcess {
    #[inline]
    pub fn value(&self, path: usize, node: usize) -> f64 {
        self.data[path * self.nodes + node]
    }
}

/// Deterministic factor `m̃(t_i) = exp(Σ_{j<i} E_j dt)` by left-endpoint
/// log-integration, one value per node.
pub fn deterministic_factor(e: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(e.len() + 1);
    let mut log_m = 0.0;
    out.push(1.0);
    for ei in e {
        log_m += ei * dt;
        out.push(log_m.exp());
    }
    out
}

/// Log-Euler scheme for `dm = E m dt + F m dW`, `m(0) = 1`:
/// `log m_{i+1} = log m_i + (E_i − |F_i|²/2) dt + F_i · ΔW_i`, which keeps
/// `m` positive by construction.
pub fn exponential_process(
    e: &[f64],
    f: &[DVector<f64>],
    ens: &PathEnsemble,
) -> Result<ExponentialProcess> {
    let steps = ens.grid.steps();
    if e.len() != steps || f.len() != steps {
        return Err(Error::Structural(format!(
            "driver tables carry {} / {} steps, grid has {steps}",
            e.len(),
            f.len()
        )));
    }
    if f[0].len() != ens.d {
        return Err(Error::Structural(format!(
            "F rows have {} components, ensemble has d = {}",
            f[0].len(),
            ens.d
        )));
    }
    let dt = ens.grid.dt();
    let nodes = steps + 1;
    let mut data = vec![0.0_f64; ens.paths * nodes];
    data.par_chunks_mut(nodes).enumerate().for_each(|(p, row)| {
        let mut log_m = 0.0;
        row[0] = 1.0;
        for i in 0..steps {
            let fi = &f[i];
            let dw = ens.dw(p, i);
            let mut fdw = 0.0;
            let mut ff = 0.0;
            for j in 0..ens.d {
                fdw += fi[j] * dw[j];
                ff += fi[j] * fi[j];
            }
            log_m += (e[i] - 0.5 * ff) * dt + fdw;
            row[i + 1] = log_m.exp();
        }
    });
    Ok(ExponentialProcess {
        paths: ens.paths,
        nodes,
        det_factor: deterministic_factor(e, dt),
        data,
    })
}

/// How a cost value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BsdeMethod {
    Representation,
    Regression,
}

/// A Monte Carlo estimate of `y(0)` with its standard error.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct BsdeValue {
    pub y0: f64,
    pub stderr: f64,
    pub method: BsdeMethod,
}

/// Exact representation solver for the linear BSDE
/// `y(t) = ξ + ∫_t^T (E y + F z + c) ds − ∫_t^T z dW`:
/// `y(0) = E[m(T) ξ + ∫ m c dt]` with left-endpoint quadrature.
///
/// `xi` is the per-path terminal value, `c(path, step)` the running forcing.
pub fn linear_bsde_value<Xi, C>(
    e: &[f64],
    f: &[DVector<f64>],
    xi: Xi,
    c: C,
    ens: &PathEnsemble,
) -> Result<BsdeValue>
where
    Xi: Fn(usize) -> f64 + Sync,
    C: Fn(usize, usize) -> f64 + Sync,
{
    let totals = linear_bsde_totals(e, f, xi, c, ens)?;
    let (mean, stderr) = linalg::mean_and_stderr(&totals);
    Ok(BsdeValue {
        y0: mean,
        stderr,
        method: BsdeMethod::Representation,
    })
}

/// Per-path totals `m(T) ξ + Σ_i m(t_i) c(t_i) dt` behind
/// [`linear_bsde_value`]; callers needing path-wise quantities (correlated
/// difference estimates) use these directly.
pub fn linear_bsde_totals<Xi, C>(
    e: &[f64],
    f: &[DVector<f64>],
    xi: Xi,
    c: C,
    ens: &PathEnsemble,
) -> Result<Vec<f64>>
where
    Xi: Fn(usize) -> f64 + Sync,
    C: Fn(usize, usize) -> f64 + Sync,
{
    let steps = ens.grid.steps();
    if e.len() != steps || f.len() != steps {
        return Err(Error::Structural(format!(
            "driver tables carry {} / {} steps, grid has {steps}",
            e.len(),
            f.len()
        )));
    }
    if f[0].len() != ens.d {
        return Err(Error::Structural(format!(
            "F rows have {} components, ensemble has d = {}",
            f[0].len(),
            ens.d
        )));
    }
    let dt = ens.grid.dt();
    let f_is_zero = f.iter().all(|row| row.iter().all(|v| *v == 0.0));
    // deterministic per-step multiplier exp((E - |F|^2/2) dt)
    let det_step: Vec<f64> = e
        .iter()
        .zip(f.iter())
        .map(|(ei, fi)| ((ei - 0.5 * fi.norm_squared()) * dt).exp())
        .collect();

    let totals: Vec<f64> = (0..ens.paths)
        .into_par_iter()
        .map(|p| {
            let mut m = 1.0_f64;
            let mut acc = 0.0_f64;
            if f_is_zero {
                for (i, step_factor) in det_step.iter().enumerate() {
                    acc += m * c(p, i) * dt;
                    m *= step_factor;
                }
            } else {
                for (i, step_factor) in det_step.iter().enumerate() {
                    acc += m * c(p, i) * dt;
                    let fi = &f[i];
                    let dw = ens.dw(p, i);
                    let mut fdw = 0.0;
                    for j in 0..ens.d {
                        fdw += fi[j] * dw[j];
                    }
                    m *= step_factor * fdw.exp();
                }
            }
            acc + m * xi(p)
        })
        .collect();
    Ok(totals)
}

/// Options for the regression solver.
#[derive(Debug, Clone)]
pub struct LsmcOptions {
    /// Cap on the polynomial basis size (intercept + linear + quadratic).
    pub basis_cap: usize,
    /// Ridge penalty applied when the normal equations are rank deficient.
    pub ridge: f64,
    /// Path batches used for the standard-error estimate.
    pub batches: usize,
}

impl Default for LsmcOptions {
    fn default() -> Self {
        Self {
            basis_cap: 16,
            ridge: 1e-8,
            batches: 8,
        }
    }
}

/// Regression solver outcome: the estimate plus any rank-deficiency warnings.
#[derive(Debug, Clone)]
pub struct LsmcOutcome {
    pub value: BsdeValue,
    pub warnings: Vec<String>,
}

/// Least-squares Monte Carlo backward solver for a general driver.
///
/// Backward induction from `y_N = φ(x_N)`: conditional expectations are
/// projected on the polynomial basis `{1, x_j, x_j x_l}` in the current
/// state, `z` is estimated by regressing `y_{i+1} ΔW_i / dt` on the same
/// basis, and the implicit-in-`y` step is closed by fixed-point iteration
/// (a single pass while `dt · |∂_y f| < 1`, otherwise iterated to 1e-12).
pub fn lsmc_bsde_value(
    sc: &GeneralScenario,
    x_paths: &StatePaths,
    control: &ControlPath,
    ens: &PathEnsemble,
    opts: &LsmcOptions,
) -> Result<LsmcOutcome> {
    if x_paths.paths != ens.paths || x_paths.nodes != ens.grid.nodes() {
        return Err(Error::Structural(
            "state paths do not match the ensemble".into(),
        ));
    }
    let mut warnings = Vec::new();
    let y0 = lsmc_backward_pass(sc, x_paths, control, ens, opts, 0..ens.paths, &mut warnings)?;

    // batch the paths for a standard-error estimate of the estimator itself
    let batches = opts.batches.clamp(2, ens.paths.max(2));
    let mut batch_values = Vec::with_capacity(batches);
    let per = ens.paths / batches;
    if per >= 8 {
        for b in 0..batches {
            let lo = b * per;
            let hi = if b + 1 == batches {
                ens.paths
            } else {
                lo + per
            };
            let mut scratch = Vec::new();
            batch_values.push(lsmc_backward_pass(
                sc,
                x_paths,
                control,
                ens,
                opts,
                lo..hi,
                &mut scratch,
            )?);
        }
    }
    let stderr = if batch_values.len() >= 2 {
        let (_, se_of_mean) = linalg::mean_and_stderr(&batch_values);
        se_of_mean
    } else {
        0.0
    };
    Ok(LsmcOutcome {
        value: BsdeValue {
            y0,
            stderr,
            method: BsdeMethod::Regression,
        },
        warnings,
    })
}

#[allow(clippy::too_many_arguments)]
fn lsmc_backward_pass(
    sc: &GeneralScenario,
    x_paths: &StatePaths,
    control: &ControlPath,
    ens: &PathEnsemble,
    opts: &LsmcOptions,
    range: std::ops::Range<usize>,
    warnings: &mut Vec<String>,
) -> Result<f64> {
    let paths: Vec<usize> = range.collect();
    let m = paths.len();
    let steps = ens.grid.steps();
    let dt = ens.grid.dt();
    let n = sc.n;

    let mut y: Vec<f64> = paths
        .iter()
        .map(|&p| (sc.terminal)(&linalg::to_vector(x_paths.state(p, steps))))
        .collect();

    let mut u_buf = vec![0.0_f64; sc.k];
    for i in (0..steps).rev() {
        let t = ens.grid.node(i);
        // basis columns at the current states, constant columns dropped
        let (basis, _kept) = build_basis(x_paths, &paths, i, n, opts.basis_cap);
        let cols = basis.ncols();
        let yv = DVector::from_column_slice(&y);
        let mut gram = basis.transpose() * &basis;
        let rhs_y = basis.transpose() * &yv;
        let alpha = match linalg::spd_solve(
            &gram,
            &DMatrix::from_column_slice(cols, 1, rhs_y.as_slice()),
        ) {
            Some(sol) => sol,
            None => {
                warnings.push(format!(
                    "step {i}: rank-deficient regression, ridge {} applied",
                    opts.ridge
                ));
                for j in 0..cols {
                    gram[(j, j)] += opts.ridge;
                }
                linalg::spd_solve(
                    &gram,
                    &DMatrix::from_column_slice(cols, 1, rhs_y.as_slice()),
                )
                .ok_or_else(|| {
                    Error::Structural(format!("regression failed at step {i} even with ridge"))
                })?
            }
        };
        let cond_exp = &basis * alpha.column(0);

        // z estimate: projection of y_{i+1} dW / dt on the same basis
        let mut z_est = DMatrix::zeros(m, sc.d);
        for j in 0..sc.d {
            let target = DVector::from_fn(m, |row, _| y[row] * ens.dw(paths[row], i)[j] / dt);
            let rhs = basis.transpose() * &target;
            let beta = match linalg::spd_solve(
                &gram,
                &DMatrix::from_column_slice(cols, 1, rhs.as_slice()),
            ) {
                Some(sol) => sol,
                None => {
                    return Err(Error::Structural(format!(
                        "z-regression failed at step {i}"
                    )))
                }
            };
            let fitted = &basis * beta.column(0);
            z_est.set_column(j, &fitted);
        }

        // implicit y step per path
        for (row, &p) in paths.iter().enumerate() {
            let x = linalg::to_vector(x_paths.state(p, i));
            control.eval_into(p, i, t, x.as_slice(), &mut u_buf);
            let u = linalg::to_vector(&u_buf);
            let z = DVector::from_fn(sc.d, |j, _| z_est[(row, j)]);
            let ce = cond_exp[row];
            let mut y_cur = ce + dt * (sc.driver)(t, &x, ce, &z, &u);
            let lip = (sc.driver_dy)(t, &x, y_cur, &z, &u).abs();
            if dt * lip >= 1.0 {
                for _ in 0..100 {
                    let y_next = ce + dt * (sc.driver)(t, &x, y_cur, &z, &u);
                    if (y_next - y_cur).abs() <= 1e-12 {
                        y_cur = y_next;
                        break;
                    }
                    y_cur = y_next;
                }
            }
            y[row] = y_cur;
        }
    }
    Ok(linalg::pairwise_sum(&y) / m as f64)
}

/// Basis matrix `{1, x_j, x_j x_l (j ≤ l)}` at node `i`, dropping
/// non-intercept columns with negligible cross-path variance (at the first
/// node every state coincides, leaving plain averaging).
fn build_basis(
    x_paths: &StatePaths,
    paths: &[usize],
    node: usize,
    n: usize,
    cap: usize,
) -> (DMatrix<f64>, usize) {
    let m = paths.len();
    let mut columns: Vec<Vec<f64>> = vec![vec![1.0; m]];
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    for j in 0..n {
        candidates.push(paths.iter().map(|&p| x_paths.state(p, node)[j]).collect());
    }
    for j in 0..n {
        for l in j..n {
            let col: Vec<f64> = paths
                .iter()
                .map(|&p| {
                    let s = x_paths.state(p, node);
                    s[j] * s[l]
                })
                .collect();
            candidates.push(col);
        }
    }
    for col in candidates {
        if columns.len() >= cap {
            break;
        }
        let mean = col.iter().sum::<f64>() / m as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        if var > 1e-12 {
            columns.push(col);
        }
    }
    let cols = columns.len();
    let mut basis = DMatrix::zeros(m, cols);
    for (j, col) in columns.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            basis[(r, j)] = *v;
        }
    }
    (basis, cols)
}

/// Scalar `F` table to per-step rows for the `d = 1` linear solver.
pub fn scalar_rows(f: &[f64]) -> Vec<DVector<f64>> {
    f.iter().map(|v| DVector::from_element(1, *v)).collect()
}

/// Recursive cost of an LQ scenario under `control`, from freshly simulated
/// state paths.
pub fn recursive_cost_lq(
    set: &LqScenarioSet,
    theta: usize,
    control: &ControlPath,
    ens: &PathEnsemble,
) -> Result<BsdeValue> {
    let paths = simulate_lq(set, theta, control, ens)?;
    recursive_cost_lq_with_paths(set, theta, &paths, control, ens)
}

/// Recursive cost of an LQ scenario from already simulated paths:
/// `ξ = 1/2 <G x(T), x(T)>`, `c = 1/2 (<L x, x> + 2 <S x, u> + <R u, u>)`,
/// solved by the linear representation with the scenario's `(E, F)` driver.
pub fn recursive_cost_lq_with_paths(
    set: &LqScenarioSet,
    theta: usize,
    paths: &StatePaths,
    control: &ControlPath,
    ens: &PathEnsemble,
) -> Result<BsdeValue> {
    let sc = set
        .scenarios
        .get(theta)
        .ok_or_else(|| Error::Input(format!("scenario index {theta} out of range")))?;
    if paths.dim != set.n {
        return Err(Error::Structural(format!(
            "state paths have dim {}, scenario has n = {}",
            paths.dim, set.n
        )));
    }
    let grid = ens.grid;
    let xi = |p: usize| 0.5 * linalg::quad_form(&sc.g, paths.state(p, grid.steps()));
    let k = set.k;
    let c = |p: usize, i: usize| {
        let x = paths.state(p, i);
        let mut u = [0.0_f64; 8];
        debug_assert!(k <= 8);
        let u = &mut u[..k];
        control.eval_into(p, i, grid.node(i), x, u);
        0.5 * (linalg::quad_form(&sc.l[i], x)
            + 2.0 * linalg::bilinear(&sc.s[i], u, x)
            + linalg::quad_form(&sc.r[i], u))
    };
    linear_bsde_value(&sc.e, &scalar_rows(&set.f), xi, c, ens)
}

/// Recursive cost of a general scenario via the regression solver.
pub fn recursive_cost_general(
    set: &GeneralScenarioSet,
    theta: usize,
    control: &ControlPath,
    ens: &PathEnsemble,
    opts: &LsmcOptions,
) -> Result<LsmcOutcome> {
    let sc = set
        .scenarios
        .get(theta)
        .ok_or_else(|| Error::Input(format!("scenario index {theta} out of range")))?;
    let paths = simulate_general(set, theta, control, ens)?;
    lsmc_bsde_value(sc, &paths, control, ens, opts)
}

/// Worst-case mixture of per-scenario costs over the probability simplex.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RobustCost {
    /// `J = max_θ y_θ(0)`.
    pub value: f64,
    /// Maximizing vertex, 1-based; ties resolve to the lowest index.
    pub argmax_theta: usize,
    /// For two scenarios: the set `{λ : λ y_1 + (1-λ) y_2 = J}` as a closed
    /// interval in `[0, 1]` (a point unless the costs tie).
    pub weight_interval: Option<(f64, f64)>,
}

/// `J(u) = max_θ y_θ(0)` over a finite scenario family.
pub fn robust_cost(values: &[BsdeValue]) -> Result<RobustCost> {
    if values.is_empty() {
        return Err(Error::Input("robust cost needs at least one value".into()));
    }
    let mut argmax = 0;
    for (i, v) in values.iter().enumerate() {
        if v.y0 > values[argmax].y0 {
            argmax = i;
        }
    }
    let weight_interval = if values.len() == 2 {
        let (y1, y2) = (values[0].y0, values[1].y0);
        Some(if y1 > y2 {
            (1.0, 1.0)
        } else if y1 < y2 {
            (0.0, 0.0)
        } else {
            (0.0, 1.0)
        })
    } else {
        None
    };
    Ok(RobustCost {
        value: values[argmax].y0,
        argmax_theta: argmax + 1,
        weight_interval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::sde::generate_paths;

    fn mk(y: f64) -> BsdeValue {
        BsdeValue {
            y0: y,
            stderr: 0.0,
            method: BsdeMethod::Representation,
        }
    }

    #[test]
    fn exponential_process_constant_drift() {
        // E = e constant, F = 0: m(t) = exp(e t), deterministic
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let ens = generate_paths(grid, 1, 3, 1).unwrap();
        let e = vec![0.7; 16];
        let f = scalar_rows(&[0.0; 16]);
        let m = exponential_process(&e, &f, &ens).unwrap();
        assert_eq!(m.value(0, 0), 1.0);
        for i in 0..=16 {
            let expected = (0.7 * grid.node(i)).exp();
            assert!((m.value(2, i) - expected).abs() < 1e-12);
            assert!((m.det_factor[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn exponential_process_zero_driver_is_one() {
        let grid = TimeGrid::new(2.0, 8).unwrap();
        let ens = generate_paths(grid, 1, 2, 1).unwrap();
        let m = exponential_process(&[0.0; 8], &scalar_rows(&[0.0; 8]), &ens).unwrap();
        for i in 0..=8 {
            assert_eq!(m.value(0, i), 1.0);
        }
    }

    #[test]
    fn exponential_martingale_has_unit_mean() {
        // E = 0, F = 1: discrete log-Euler m(T) has mean exactly 1 per step,
        // so the sample mean sits within 5 standard errors of 1.
        let steps = 16;
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let m_paths = 20_000;
        let ens = generate_paths(grid, 1, m_paths, 5).unwrap();
        let m =
            exponential_process(&vec![0.0; steps], &scalar_rows(&vec![1.0; steps]), &ens).unwrap();
        let terminal: Vec<f64> = (0..m_paths).map(|p| m.value(p, steps)).collect();
        let (mean, se) = linalg::mean_and_stderr(&terminal);
        assert!((mean - 1.0).abs() < 5.0 * se, "mean {mean}, se {se}");
        // positivity and factorization against the deterministic part
        assert!(terminal.iter().all(|v| *v > 0.0));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn factorization_into_det_and_martingale_parts() {
        let steps = 32;
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let ens = generate_paths(grid, 1, 50, 5).unwrap();
        let e: Vec<f64> = (0..steps).map(|i| 0.3 + 0.1 * (i as f64)).collect();
        let fv = vec![0.8; steps];
        let m = exponential_process(&e, &scalar_rows(&fv), &ens).unwrap();
        let dt = grid.dt();
        for p in 0..50 {
            let mut log_eps = 0.0;
            for i in 0..steps {
                log_eps += fv[i] * ens.dw1(p, i) - 0.5 * fv[i] * fv[i] * dt;
                let lhs = m.value(p, i + 1);
                let rhs = m.det_factor[i + 1] * log_eps.exp();
                assert!(
                    (lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0),
                    "path {p} node {} lhs {lhs} rhs {rhs}",
                    i + 1
                );
            }
        }
    }

    #[test]
    fn linear_value_pure_running_integral() {
        // xi = 0, c = 1, E = F = 0 -> y(0) = T exactly
        let grid = TimeGrid::new(2.0, 32).unwrap();
        let ens = generate_paths(grid, 1, 4, 1).unwrap();
        let v = linear_bsde_value(
            &vec![0.0; 32],
            &scalar_rows(&vec![0.0; 32]),
            |_| 0.0,
            |_, _| 1.0,
            &ens,
        )
        .unwrap();
        assert!((v.y0 - 2.0).abs() < 1e-12);
        assert_eq!(v.stderr, 0.0);
    }

    #[test]
    fn linear_value_deterministic_discounting() {
        // xi = 1, c = 0, E = e, F = 0 -> y(0) = exp(e T)
        let steps = 64;
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let ens = generate_paths(grid, 1, 4, 1).unwrap();
        let e = 0.9;
        let v = linear_bsde_value(
            &vec![e; steps],
            &scalar_rows(&vec![0.0; steps]),
            |_| 1.0,
            |_, _| 0.0,
            &ens,
        )
        .unwrap();
        assert!((v.y0 - (e).exp()).abs() < 1e-12, "y0 = {}", v.y0);
    }

    #[test]
    fn monotone_in_the_forcing_under_shared_ensemble() {
        let steps = 16;
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let ens = generate_paths(grid, 1, 200, 3).unwrap();
        let e = vec![0.2; steps];
        let f = scalar_rows(&vec![0.4; steps]);
        let lo = linear_bsde_value(&e, &f, |_| 0.0, |_, _| 1.0, &ens).unwrap();
        let hi = linear_bsde_value(&e, &f, |_| 0.0, |_, _| 1.25, &ens).unwrap();
        assert!(hi.y0 > lo.y0);
    }

    #[test]
    fn a_priori_bound_with_computable_constant() {
        // |y(0)| <= exp((|E| + |F|^2/2) T) * E[|xi| + ∫|c| dt] on a fixture
        // with bounded data.
        let steps = 32;
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let ens = generate_paths(grid, 1, 2000, 9).unwrap();
        let e = vec![0.5; steps];
        let fv = vec![0.5; steps];
        let v = linear_bsde_value(
            &e,
            &scalar_rows(&fv),
            |_| 1.0,
            |p, i| if (p + i) % 2 == 0 { 0.5 } else { -0.25 },
            &ens,
        )
        .unwrap();
        let bound_c = ((0.5 + 0.5 * 0.5 * 0.5) * grid.horizon()).exp();
        // E[|xi| + ∫|c|dt] = 1 + mean of |c| integral; |c| <= 0.5
        let rhs = bound_c * (1.0 + 0.5 * grid.horizon());
        assert!(v.y0.abs() <= rhs, "y0 {} vs bound {rhs}", v.y0);
    }

    #[test]
    fn lq_cost_under_closed_form_feedback_is_one_quarter() {
        // classical scalar data under u = -P(t) x with the closed form
        // P(t) = 1/(2 - t): the recursive cost is exactly 1/4
        let steps = 400;
        let set = crate::instances::classical_scalar(steps);
        let ens = generate_paths(set.grid, 1, 32, 1).unwrap();
        let gain: Vec<DMatrix<f64>> = (0..steps)
            .map(|i| DMatrix::from_element(1, 1, -1.0 / (2.0 - set.grid.node(i))))
            .collect();
        let offset = vec![DVector::zeros(1); steps];
        let ctrl = ControlPath::Feedback { gain, offset };
        let v = recursive_cost_lq(&set, 0, &ctrl, &ens).unwrap();
        let tol = 2.0 * v.stderr + 2e-3;
        assert!((v.y0 - 0.25).abs() <= tol, "y(0) = {}", v.y0);
    }

    #[test]
    fn robust_cost_vertices_and_ties() {
        let rc = robust_cost(&[mk(1.0), mk(2.0)]).unwrap();
        assert_eq!(rc.value, 2.0);
        assert_eq!(rc.argmax_theta, 2);
        assert_eq!(rc.weight_interval, Some((0.0, 0.0)));

        let tie = robust_cost(&[mk(3.0), mk(3.0)]).unwrap();
        assert_eq!(tie.value, 3.0);
        assert_eq!(tie.argmax_theta, 1);
        assert_eq!(tie.weight_interval, Some((0.0, 1.0)));

        let single = robust_cost(&[mk(5.0)]).unwrap();
        assert_eq!(single.value, 5.0);
        assert_eq!(single.argmax_theta, 1);
        assert!(single.weight_interval.is_none());
    }

    #[test]
    fn lsmc_reproduces_backward_exponential() {
        // f = -y, phi = 1, no x dependence: y(0) = exp(-T); N = 200 within 1e-2
        let steps = 200;
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let ens = generate_paths(grid, 1, 512, 13).unwrap();
        let sc = GeneralScenario {
            n: 1,
            k: 1,
            d: 1,
            drift: Box::new(|_, _, _| DVector::zeros(1)),
            diffusion: Box::new(|_, _, _| DMatrix::identity(1, 1)),
            driver: Box::new(|_, _, y, _, _| -y),
            terminal: Box::new(|_| 1.0),
            drift_dx: Box::new(|_, _, _| DMatrix::zeros(1, 1)),
            drift_du: Box::new(|_, _, _| DMatrix::zeros(1, 1)),
            diffusion_dx: Box::new(|_, _, _| vec![DMatrix::zeros(1, 1)]),
            diffusion_du: Box::new(|_, _, _| vec![DMatrix::zeros(1, 1)]),
            driver_dx: Box::new(|_, _, _, _, _| DVector::zeros(1)),
            driver_dy: Box::new(|_, _, _, _, _| -1.0),
            driver_dz: Box::new(|_, _, _, _, _| DVector::zeros(1)),
            driver_du: Box::new(|_, _, _, _, _| DVector::zeros(1)),
            terminal_dx: Box::new(|_| DVector::zeros(1)),
        };
        let set = GeneralScenarioSet {
            scenarios: vec![sc],
            x0: DVector::zeros(1),
            grid,
        };
        let ctrl = ControlPath::zero(steps, 1);
        let out = recursive_cost_general(&set, 0, &ctrl, &ens, &LsmcOptions::default()).unwrap();
        let expected = (-1.0_f64).exp();
        let rel = (out.value.y0 - expected).abs() / expected;
        assert!(rel <= 1e-2, "y0 = {}, rel err {rel}", out.value.y0);
    }

    #[test]
    fn collinear_basis_falls_back_to_ridge_with_warning() {
        // states taking only the values {0, 1} make the quadratic column
        // equal the linear one; the normal equations lose rank and the
        // solver retreats to the ridge
        let steps = 4;
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let m = 64;
        let ens = generate_paths(grid, 1, m, 3).unwrap();
        let sc = GeneralScenario {
            n: 1,
            k: 1,
            d: 1,
            drift: Box::new(|_, _, _| DVector::zeros(1)),
            diffusion: Box::new(|_, _, _| DMatrix::zeros(1, 1)),
            driver: Box::new(|_, x, _, _, _| x[0]),
            terminal: Box::new(|x| x[0]),
            drift_dx: Box::new(|_, _, _| DMatrix::zeros(1, 1)),
            drift_du: Box::new(|_, _, _| DMatrix::zeros(1, 1)),
            diffusion_dx: Box::new(|_, _, _| vec![DMatrix::zeros(1, 1)]),
            diffusion_du: Box::new(|_, _, _| vec![DMatrix::zeros(1, 1)]),
            driver_dx: Box::new(|_, _, _, _, _| DVector::from_element(1, 1.0)),
            driver_dy: Box::new(|_, _, _, _, _| 0.0),
            driver_dz: Box::new(|_, _, _, _, _| DVector::zeros(1)),
            driver_du: Box::new(|_, _, _, _, _| DVector::zeros(1)),
            terminal_dx: Box::new(|_| DVector::from_element(1, 1.0)),
        };
        let mut paths = StatePaths::zeros(grid, m, 1);
        for p in 0..m {
            for i in 0..=steps {
                paths.state_mut(p, i)[0] = (p % 2) as f64;
            }
        }
        let ctrl = ControlPath::zero(steps, 1);
        let out = lsmc_bsde_value(&sc, &paths, &ctrl, &ens, &LsmcOptions::default()).unwrap();
        assert!(
            !out.warnings.is_empty(),
            "rank-deficient regression should be reported"
        );
        assert!(out.value.y0.is_finite());
        // y(0) = E[x(T) + ∫ x dt] = 0.5 * (1 + T) on this frozen half/half
        // population
        assert!((out.value.y0 - 1.0).abs() < 1e-6, "y0 = {}", out.value.y0);
    }

    #[test]
    fn lsmc_matches_plain_monte_carlo_without_yz_dependence() {
        // f = x^2 (no y, z), phi = 0: y(0) equals plain MC of ∫ x^2 dt
        let steps = 40;
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let m = 2000;
        let ens = generate_paths(grid, 1, m, 29).unwrap();
        let sc = GeneralScenario {
            n: 1,
            k: 1,
            d: 1,
            drift: Box::new(|_, _, _| DVector::zeros(1)),
            diffusion: Box::new(|_, _, _| DMatrix::identity(1, 1)),
            driver: Box::new(|_, x, _, _, _| x[0] * x[0]),
            terminal: Box::new(|_| 0.0),
            drift_dx: Box::new(|_, _, _| DMatrix::zeros(1, 1)),
            drift_du: Box::new(|_, _, _| DMatrix::zeros(1, 1)),
            diffusion_dx: Box::new(|_, _, _| vec![DMatrix::zeros(1, 1)]),
            diffusion_du: Box::new(|_, _, _| vec![DMatrix::zeros(1, 1)]),
            driver_dx: Box::new(|_, x, _, _, _| DVector::from_element(1, 2.0 * x[0])),
            driver_dy: Box::new(|_, _, _, _, _| 0.0),
            driver_dz: Box::new(|_, _, _, _, _| DVector::zeros(1)),
            driver_du: Box::new(|_, _, _, _, _| DVector::zeros(1)),
            terminal_dx: Box::new(|_| DVector::zeros(1)),
        };
        let set = GeneralScenarioSet {
            scenarios: vec![sc],
            x0: DVector::zeros(1),
            grid,
        };
        let ctrl = ControlPath::zero(steps, 1);
        let paths = simulate_general(&set, 0, &ctrl, &ens).unwrap();
        let out = lsmc_bsde_value(
            &set.scenarios[0],
            &paths,
            &ctrl,
            &ens,
            &LsmcOptions::default(),
        )
        .unwrap();
        // plain Monte Carlo of the running integral on the same paths
        let dt = grid.dt();
        let plain: Vec<f64> = (0..m)
            .map(|p| {
                (0..steps)
                    .map(|i| {
                        let x = paths.state(p, i)[0];
                        x * x * dt
                    })
                    .sum()
            })
            .collect();
        let (plain_mean, plain_se) = linalg::mean_and_stderr(&plain);
        let combined = (plain_se.powi(2) + out.value.stderr.powi(2))
            .sqrt()
            .max(1e-12);
        assert!(
            (out.value.y0 - plain_mean).abs() <= 2.0 * combined + 1e-9,
            "lsmc {} vs plain {plain_mean} (se {combined})",
            out.value.y0
        );
    }
}
