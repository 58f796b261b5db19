//! Brownian path generation and Euler–Maruyama simulation.
//!
//! Increments are generated from per-path ChaCha streams with a fixed word
//! budget per step, so the draw for `(seed, path, step)` is the same no
//! matter how the work is split across workers, and any single increment can
//! be regenerated in isolation. All cross-path reductions elsewhere in the
//! crate run through pairwise summation, which keeps every Monte Carlo
//! answer byte-stable for a fixed seed.

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg;
use crate::scenario::{GeneralScenarioSet, LqScenarioSet, MatrixTable};

/// Default cap on ensemble allocation (bytes of increment data).
pub const DEFAULT_MEMORY_BUDGET: usize = 2 << 30;

/// Abort threshold for the state overflow guard.
const STATE_OVERFLOW: f64 = 1e12;

const U64_TO_UNIT: f64 = 1.0 / 9007199254740992.0; // 2^-53

/// Two standard normals from two raw 64-bit words (Box–Muller).
///
/// Fixed word consumption is what makes the stream counter-addressable;
/// rejection-style samplers would consume a variable number of words.
#[inline]
fn normal_pair(w1: u64, w2: u64) -> (f64, f64) {
    let u1 = ((w1 >> 11) as f64 + 0.5) * U64_TO_UNIT;
    let u2 = ((w2 >> 11) as f64 + 0.5) * U64_TO_UNIT;
    let r = (-2.0 * u1.ln()).sqrt();
    let (sin, cos) = (std::f64::consts::TAU * u2).sin_cos();
    (r * cos, r * sin)
}

/// ChaCha words (u32) consumed per step for `d` increments.
fn words_per_step(d: usize) -> u128 {
    (d.div_ceil(2) * 4) as u128
}

/// Brownian increments for `paths` paths on a grid, `ΔW ~ N(0, dt I_d)`.
///
/// Layout: `data[(path * steps + step) * d + component]`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub d: usize,
    pub paths: usize,
    pub seed: u64,
    data: Vec<f64>,
}

impl PathEnsemble {
    /// Increments of one (path, step).
    #[inline]
    pub fn dw(&self, path: usize, step: usize) -> &[f64] {
        let base = (path * self.grid.steps() + step) * self.d;
        &self.data[base..base + self.d]
    }

    /// Scalar increment, `d = 1` ensembles.
    #[inline]
    pub fn dw1(&self, path: usize, step: usize) -> f64 {
        debug_assert_eq!(self.d, 1);
        self.data[path * self.grid.steps() + step]
    }
}

/// Regenerate the increments of a single `(seed, path, step)` key.
pub fn increments_at(grid: TimeGrid, d: usize, seed: u64, path: usize, step: usize) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng.set_word_pos(step as u128 * words_per_step(d));
    let sqrt_dt = grid.dt().sqrt();
    let mut out = Vec::with_capacity(d);
    let mut j = 0;
    while j < d {
        let (z0, z1) = normal_pair(rng.next_u64(), rng.next_u64());
        out.push(z0 * sqrt_dt);
        if j + 1 < d {
            out.push(z1 * sqrt_dt);
        }
        j += 2;
    }
    out
}

/// Generate an ensemble under the default memory budget.
pub fn generate_paths(grid: TimeGrid, d: usize, paths: usize, seed: u64) -> Result<PathEnsemble> {
    generate_paths_with_budget(grid, d, paths, seed, DEFAULT_MEMORY_BUDGET)
}

/// Generate an ensemble, failing before allocation if it would exceed
/// `budget_bytes`.
pub fn generate_paths_with_budget(
    grid: TimeGrid,
    d: usize,
    paths: usize,
    seed: u64,
    budget_bytes: usize,
) -> Result<PathEnsemble> {
    if paths == 0 {
        return Err(Error::Input("paths must be >= 1".into()));
    }
    if d == 0 {
        return Err(Error::Input("d must be >= 1".into()));
    }
    let entries = paths
        .checked_mul(grid.steps())
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::Capacity("ensemble size overflows usize".into()))?;
    let bytes = entries
        .checked_mul(std::mem::size_of::<f64>())
        .ok_or_else(|| Error::Capacity("ensemble size overflows usize".into()))?;
    if bytes > budget_bytes {
        return Err(Error::Capacity(format!(
            "ensemble needs {bytes} bytes ({} paths x {} steps x {d}), budget is {budget_bytes}",
            paths,
            grid.steps()
        )));
    }

    let steps = grid.steps();
    let sqrt_dt = grid.dt().sqrt();
    let mut data = vec![0.0_f64; entries];
    data.par_chunks_mut(steps * d)
        .enumerate()
        .for_each(|(path, chunk)| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(path as u64);
            for step in 0..steps {
                let mut j = 0;
                while j < d {
                    let (z0, z1) = normal_pair(rng.next_u64(), rng.next_u64());
                    chunk[step * d + j] = z0 * sqrt_dt;
                    if j + 1 < d {
                        chunk[step * d + j + 1] = z1 * sqrt_dt;
                    }
                    j += 2;
                }
            }
        });
    Ok(PathEnsemble {
        grid,
        d,
        paths,
        seed,
        data,
    })
}

/// Simulated state trajectories: `dim` components at every grid node of
/// every path. Layout: `data[(path * nodes + node) * dim + component]`.
#[derive(Debug, Clone)]
pub struct StatePaths {
    pub paths: usize,
    pub nodes: usize,
    pub dim: usize,
    pub grid: TimeGrid,
    /// Scenario index the paths were simulated under, when applicable.
    pub theta: Option<usize>,
    /// Short description of the driving control.
    pub control: String,
    data: Vec<f64>,
}

impl StatePaths {
    pub fn zeros(grid: TimeGrid, paths: usize, dim: usize) -> Self {
        let nodes = grid.nodes();
        Self {
            paths,
            nodes,
            dim,
            grid,
            theta: None,
            control: String::new(),
            data: vec![0.0; paths * nodes * dim],
        }
    }

    #[inline]
    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        let base = (path * self.nodes + node) * self.dim;
        &self.data[base..base + self.dim]
    }

    #[inline]
    pub fn state_mut(&mut self, path: usize, node: usize) -> &mut [f64] {
        let base = (path * self.nodes + node) * self.dim;
        &mut self.data[base..base + self.dim]
    }

    /// Mutable per-path blocks, for parallel fills.
    pub fn path_blocks_mut(&mut self) -> rayon::slice::ChunksMut<'_, f64> {
        self.data.par_chunks_mut(self.nodes * self.dim)
    }

    /// Monte Carlo estimate of `E[sup_t |x(t)|^q]`.
    pub fn sup_moment(&self, q: f64) -> f64 {
        let per_path: Vec<f64> = (0..self.paths)
            .map(|p| {
                let mut sup: f64 = 0.0;
                for i in 0..self.nodes {
                    sup = sup.max(linalg::slice_norm(self.state(p, i)));
                }
                sup.powf(q)
            })
            .collect();
        linalg::pairwise_sum(&per_path) / self.paths as f64
    }
}

/// Per-path, per-step realized control values.
#[derive(Debug, Clone)]
pub struct OpenLoopControl {
    pub paths: usize,
    pub steps: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl OpenLoopControl {
    pub fn zeros(paths: usize, steps: usize, dim: usize) -> Self {
        Self {
            paths,
            steps,
            dim,
            data: vec![0.0; paths * steps * dim],
        }
    }

    #[inline]
    pub fn value(&self, path: usize, step: usize) -> &[f64] {
        let base = (path * self.steps + step) * self.dim;
        &self.data[base..base + self.dim]
    }

    #[inline]
    pub fn value_mut(&mut self, path: usize, step: usize) -> &mut [f64] {
        let base = (path * self.steps + step) * self.dim;
        &mut self.data[base..base + self.dim]
    }

    pub fn path_blocks_mut(&mut self) -> rayon::slice::ChunksMut<'_, f64> {
        self.data.par_chunks_mut(self.steps * self.dim)
    }
}

/// State-feedback closure `(t, x) -> u` for general toy problems.
pub type FeedbackFn = Box<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// A control process: deterministic step-indexed values, per-path realized
/// values, a step-indexed affine feedback `u_i = gain_i x + offset_i`, or a
/// feedback callable for general toys.
pub enum ControlPath {
    Deterministic(Vec<DVector<f64>>),
    OpenLoop(OpenLoopControl),
    Feedback {
        gain: Vec<DMatrix<f64>>,
        offset: Vec<DVector<f64>>,
    },
    Callable(FeedbackFn),
}

impl std::fmt::Debug for ControlPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl ControlPath {
    /// Zero control of dimension `k` on `steps` steps.
    pub fn zero(steps: usize, k: usize) -> Self {
        ControlPath::Deterministic(vec![DVector::zeros(k); steps])
    }

    pub fn label(&self) -> &'static str {
        match self {
            ControlPath::Deterministic(_) => "deterministic",
            ControlPath::OpenLoop(_) => "open-loop",
            ControlPath::Feedback { .. } => "feedback",
            ControlPath::Callable(_) => "callable",
        }
    }

    /// Evaluate into `out`; `x` is the state the control observes.
    #[inline]
    pub fn eval_into(&self, path: usize, step: usize, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            ControlPath::Deterministic(values) => {
                out.copy_from_slice(values[step].as_slice());
            }
            ControlPath::OpenLoop(ctrl) => {
                out.copy_from_slice(ctrl.value(path, step));
            }
            ControlPath::Feedback { gain, offset } => {
                linalg::matvec_into(&gain[step], x, out);
                for (o, v) in out.iter_mut().zip(offset[step].iter()) {
                    *o += v;
                }
            }
            ControlPath::Callable(f) => {
                let u = f(t, &linalg::to_vector(x));
                out.copy_from_slice(u.as_slice());
            }
        }
    }

    fn dim(&self, fallback: usize) -> usize {
        match self {
            ControlPath::Deterministic(values) => values.first().map_or(fallback, |v| v.len()),
            ControlPath::OpenLoop(ctrl) => ctrl.dim,
            ControlPath::Feedback { gain, .. } => gain.first().map_or(fallback, |g| g.nrows()),
            ControlPath::Callable(_) => fallback,
        }
    }
}

/// Step-indexed affine dynamics `dx = (a x + b u) dt + (c x + d u) dW` with
/// scalar noise. Both the per-scenario LQ state equation and the stacked
/// closed-loop system are instances of this.
pub struct AffineDynamics<'a> {
    pub a: &'a MatrixTable,
    pub b: &'a MatrixTable,
    pub c: &'a MatrixTable,
    pub d: &'a MatrixTable,
}

/// Euler scheme for affine dynamics under a shared ensemble; optionally
/// records the realized control path-wise.
pub fn simulate_affine(
    dynamics: &AffineDynamics<'_>,
    x0: &DVector<f64>,
    control: &ControlPath,
    ens: &PathEnsemble,
    record_control: bool,
) -> Result<(StatePaths, Option<OpenLoopControl>)> {
    if ens.d != 1 {
        return Err(Error::Structural(format!(
            "affine dynamics require a scalar-noise ensemble, got d = {}",
            ens.d
        )));
    }
    let grid = ens.grid;
    let steps = grid.steps();
    if dynamics.a.len() != steps {
        return Err(Error::Structural(format!(
            "dynamics tables carry {} steps, ensemble grid has {steps}",
            dynamics.a.len()
        )));
    }
    let dim = x0.len();
    let k = control.dim(dynamics.b[0].ncols());
    if dynamics.b[0].ncols() != k {
        return Err(Error::Structural(format!(
            "control dimension {k} does not match B ({} columns)",
            dynamics.b[0].ncols()
        )));
    }
    let dt = grid.dt();

    let mut paths = StatePaths::zeros(grid, ens.paths, dim);
    paths.control = control.label().to_string();
    let mut recorded = record_control.then(|| OpenLoopControl::zeros(ens.paths, steps, k));

    // Fill states (and the recorded control) per path in parallel; results
    // land in disjoint slices so placement is worker-independent.
    let results: Vec<Result<()>> = match &mut recorded {
        Some(rec) => paths
            .path_blocks_mut()
            .zip(rec.path_blocks_mut())
            .enumerate()
            .map(|(path, (states, recs))| {
                simulate_one_affine_path(
                    dynamics,
                    x0,
                    control,
                    ens,
                    path,
                    states,
                    Some(recs),
                    dt,
                    dim,
                    k,
                )
            })
            .collect(),
        None => paths
            .path_blocks_mut()
            .enumerate()
            .map(|(path, states)| {
                simulate_one_affine_path(dynamics, x0, control, ens, path, states, None, dt, dim, k)
            })
            .collect(),
    };
    for r in results {
        r?;
    }
    Ok((paths, recorded))
}

#[allow(clippy::too_many_arguments)]
fn simulate_one_affine_path(
    dynamics: &AffineDynamics<'_>,
    x0: &DVector<f64>,
    control: &ControlPath,
    ens: &PathEnsemble,
    path: usize,
    states: &mut [f64],
    mut recorded: Option<&mut [f64]>,
    dt: f64,
    dim: usize,
    k: usize,
) -> Result<()> {
    let steps = ens.grid.steps();
    let mut x = vec![0.0_f64; dim];
    let mut u = vec![0.0_f64; k];
    let mut xn = vec![0.0_f64; dim];
    x.copy_from_slice(x0.as_slice());
    states[..dim].copy_from_slice(&x);
    for i in 0..steps {
        let t = ens.grid.node(i);
        control.eval_into(path, i, t, &x, &mut u);
        if let Some(rec) = recorded.as_deref_mut() {
            rec[i * k..(i + 1) * k].copy_from_slice(&u);
        }
        let dw = ens.dw1(path, i);
        xn.copy_from_slice(&x);
        linalg::matvec_add_into(&dynamics.a[i], &x, dt, &mut xn);
        linalg::matvec_add_into(&dynamics.b[i], &u, dt, &mut xn);
        linalg::matvec_add_into(&dynamics.c[i], &x, dw, &mut xn);
        linalg::matvec_add_into(&dynamics.d[i], &u, dw, &mut xn);
        if xn
            .iter()
            .any(|v| !v.is_finite() || v.abs() > STATE_OVERFLOW)
        {
            return Err(Error::Simulation {
                path,
                step: i,
                detail: format!("|x| exceeded {STATE_OVERFLOW:e}"),
            });
        }
        states[(i + 1) * dim..(i + 2) * dim].copy_from_slice(&xn);
        x.copy_from_slice(&xn);
    }
    Ok(())
}

/// State equation of one LQ scenario under `control`.
pub fn simulate_lq(
    set: &LqScenarioSet,
    theta: usize,
    control: &ControlPath,
    ens: &PathEnsemble,
) -> Result<StatePaths> {
    let sc = set
        .scenarios
        .get(theta)
        .ok_or_else(|| Error::Input(format!("scenario index {theta} out of range")))?;
    let dynamics = AffineDynamics {
        a: &sc.a,
        b: &sc.b,
        c: &sc.c,
        d: &sc.d,
    };
    let (mut paths, _) = simulate_affine(&dynamics, &set.x0, control, ens, false)?;
    paths.theta = Some(theta);
    Ok(paths)
}

/// Variational state of an LQ scenario in direction `dir`: the linearized
/// dynamics coincide with the state dynamics, started from zero and driven
/// by the direction.
pub fn simulate_lq_variational(
    set: &LqScenarioSet,
    theta: usize,
    dir: &ControlPath,
    ens: &PathEnsemble,
) -> Result<StatePaths> {
    let sc = set
        .scenarios
        .get(theta)
        .ok_or_else(|| Error::Input(format!("scenario index {theta} out of range")))?;
    let dynamics = AffineDynamics {
        a: &sc.a,
        b: &sc.b,
        c: &sc.c,
        d: &sc.d,
    };
    let zero = DVector::zeros(set.n);
    let (mut paths, _) = simulate_affine(&dynamics, &zero, dir, ens, false)?;
    paths.theta = Some(theta);
    Ok(paths)
}

/// Euler scheme for a general scenario.
pub fn simulate_general(
    set: &GeneralScenarioSet,
    theta: usize,
    control: &ControlPath,
    ens: &PathEnsemble,
) -> Result<StatePaths> {
    let sc = set
        .scenarios
        .get(theta)
        .ok_or_else(|| Error::Input(format!("scenario index {theta} out of range")))?;
    if ens.d != sc.d {
        return Err(Error::Structural(format!(
            "ensemble has d = {}, scenario needs d = {}",
            ens.d, sc.d
        )));
    }
    let grid = ens.grid;
    let steps = grid.steps();
    let dt = grid.dt();
    let n = sc.n;
    let mut paths = StatePaths::zeros(grid, ens.paths, n);
    paths.theta = Some(theta);
    paths.control = control.label().to_string();
    let x0 = set.x0.clone();

    let results: Vec<Result<()>> = paths
        .path_blocks_mut()
        .enumerate()
        .map(|(path, states)| {
            let mut x = x0.clone();
            let mut u = vec![0.0_f64; sc.k];
            states[..n].copy_from_slice(x.as_slice());
            for i in 0..steps {
                let t = grid.node(i);
                control.eval_into(path, i, t, x.as_slice(), &mut u);
                let uv = linalg::to_vector(&u);
                let drift = (sc.drift)(t, &x, &uv);
                let diff = (sc.diffusion)(t, &x, &uv);
                let dw = ens.dw(path, i);
                for r in 0..n {
                    let mut v = x[r] + drift[r] * dt;
                    for j in 0..sc.d {
                        v += diff[(r, j)] * dw[j];
                    }
                    x[r] = v;
                }
                if x.iter().any(|v| !v.is_finite() || v.abs() > STATE_OVERFLOW) {
                    return Err(Error::Simulation {
                        path,
                        step: i,
                        detail: format!("|x| exceeded {STATE_OVERFLOW:e}"),
                    });
                }
                states[(i + 1) * n..(i + 2) * n].copy_from_slice(x.as_slice());
            }
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }
    Ok(paths)
}

/// Variational SDE of a general scenario: linearized coefficients evaluated
/// along the base trajectory and base control, driven by `dir = u - ū`.
pub fn simulate_general_variational(
    set: &GeneralScenarioSet,
    theta: usize,
    u_bar: &ControlPath,
    dir: &ControlPath,
    base: &StatePaths,
    ens: &PathEnsemble,
) -> Result<StatePaths> {
    let sc = set
        .scenarios
        .get(theta)
        .ok_or_else(|| Error::Input(format!("scenario index {theta} out of range")))?;
    if base.paths != ens.paths || base.nodes != ens.grid.nodes() {
        return Err(Error::Structural(
            "base paths do not match the ensemble".into(),
        ));
    }
    let grid = ens.grid;
    let steps = grid.steps();
    let dt = grid.dt();
    let n = sc.n;
    let mut paths = StatePaths::zeros(grid, ens.paths, n);
    paths.theta = Some(theta);
    paths.control = "variational".to_string();

    let results: Vec<Result<()>> = paths
        .path_blocks_mut()
        .enumerate()
        .map(|(path, states)| {
            let mut xhat = DVector::zeros(n);
            let mut ub = vec![0.0_f64; sc.k];
            let mut dv = vec![0.0_f64; sc.k];
            for i in 0..steps {
                let t = grid.node(i);
                let xbar = linalg::to_vector(base.state(path, i));
                u_bar.eval_into(path, i, t, xbar.as_slice(), &mut ub);
                dir.eval_into(path, i, t, xbar.as_slice(), &mut dv);
                let ubv = linalg::to_vector(&ub);
                let dirv = linalg::to_vector(&dv);
                let bx = (sc.drift_dx)(t, &xbar, &ubv);
                let bu = (sc.drift_du)(t, &xbar, &ubv);
                let sx = (sc.diffusion_dx)(t, &xbar, &ubv);
                let su = (sc.diffusion_du)(t, &xbar, &ubv);
                let dw = ens.dw(path, i);
                let mut next = &xhat + (&bx * &xhat + &bu * &dirv) * dt;
                for j in 0..sc.d {
                    next += (&sx[j] * &xhat + &su[j] * &dirv) * dw[j];
                }
                xhat = next;
                if xhat
                    .iter()
                    .any(|v| !v.is_finite() || v.abs() > STATE_OVERFLOW)
                {
                    return Err(Error::Simulation {
                        path,
                        step: i,
                        detail: format!("|x| exceeded {STATE_OVERFLOW:e}"),
                    });
                }
                states[(i + 1) * n..(i + 2) * n].copy_from_slice(xhat.as_slice());
            }
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }
    Ok(paths)
}

// --- strong convergence fitting ---------------------------------------------

/// Scalar benchmark problem with an exact terminal value conditional on the
/// path's total Brownian displacement.
pub struct ConvergenceProblem {
    pub x0: f64,
    pub horizon: f64,
    pub drift: Box<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub diffusion: Box<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    /// Exact solution at `T` given `W(T)`.
    pub exact_terminal: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

/// Result of a convergence-order fit.
#[derive(Debug, Clone, serde::Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OrderFit {
    /// All levels reproduced the reference to rounding; no slope to fit.
    Exact,
    Slope {
        slope: f64,
        /// `(steps, rms error)` per refinement level.
        errors: Vec<(usize, f64)>,
    },
}

/// Empirical strong order of the Euler scheme on a benchmark problem:
/// fits the slope of log RMS terminal error against log dt.
pub fn strong_convergence_order(
    problem: &ConvergenceProblem,
    levels: &[usize],
    paths: usize,
    seed: u64,
) -> Result<OrderFit> {
    if levels.len() < 3 {
        return Err(Error::Input(format!(
            "need at least 3 refinement levels, got {}",
            levels.len()
        )));
    }
    let mut dts = Vec::with_capacity(levels.len());
    let mut errors = Vec::with_capacity(levels.len());
    for &steps in levels {
        let grid = TimeGrid::new(problem.horizon, steps)?;
        let ens = generate_paths(grid, 1, paths, seed)?;
        let dt = grid.dt();
        let sq: Vec<f64> = (0..paths)
            .into_par_iter()
            .map(|p| {
                let mut x = problem.x0;
                let mut w_total = 0.0;
                for i in 0..steps {
                    let t = grid.node(i);
                    let dw = ens.dw1(p, i);
                    x += (problem.drift)(t, x) * dt + (problem.diffusion)(t, x) * dw;
                    w_total += dw;
                }
                let err = x - (problem.exact_terminal)(w_total);
                err * err
            })
            .collect();
        let rms = (linalg::pairwise_sum(&sq) / paths as f64).sqrt();
        dts.push(dt);
        errors.push(rms);
    }
    let scale = problem.x0.abs().max(1.0);
    if errors.iter().all(|e| *e < 1e-14 * scale) {
        return Ok(OrderFit::Exact);
    }
    let slope = linalg::fit_loglog_slope(&dts, &errors);
    Ok(OrderFit::Slope {
        slope,
        errors: levels.iter().copied().zip(errors).collect(),
    })
}
