//! Ready-made scenario sets: analytically tractable fixtures and a seeded
//! generator of random assumption-satisfying instances. Used heavily by the
//! test suites and handy for benchmarks and demos.

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::grid::TimeGrid;
use crate::scenario::{LqScenario, LqScenarioSet};

fn grid_1(steps: usize) -> TimeGrid {
    TimeGrid::new(1.0, steps).expect("valid grid")
}

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// Identical classical scenarios: `A = C = S = E = F = L = 0`, `B = 1`,
/// `D = 0`, `G = R = 1`, `x0 = 1`, `T = 1`.
///
/// The aggregated Riccati solution at the λ = 1 vertex has
/// `P_11(t) = 1/(2 - t)` and the optimal cost is `1/4`.
pub fn classical_scalar(steps: usize) -> LqScenarioSet {
    let z = scalar(0.0);
    let sc = LqScenario::constant(
        steps,
        z.clone(),
        scalar(1.0),
        z.clone(),
        z.clone(),
        0.0,
        z.clone(),
        z.clone(),
        scalar(1.0),
        scalar(1.0),
    );
    LqScenarioSet::new(
        vec![sc.clone(), sc],
        vec![0.0; steps],
        DVector::from_element(1, 1.0),
        grid_1(steps),
    )
    .expect("valid fixture")
}

/// Classical pair with exponential discounting on scenario 1 only
/// (`E_1 = 1`, `E_2 = 0`); exposes the `m̃`-weighting of the aggregation.
pub fn discounted_pair(steps: usize) -> LqScenarioSet {
    let z = scalar(0.0);
    let mk = |e: f64| {
        LqScenario::constant(
            steps,
            z.clone(),
            scalar(1.0),
            z.clone(),
            z.clone(),
            e,
            z.clone(),
            z.clone(),
            scalar(1.0),
            scalar(1.0),
        )
    };
    LqScenarioSet::new(
        vec![mk(1.0), mk(0.0)],
        vec![0.0; steps],
        DVector::from_element(1, 1.0),
        grid_1(steps),
    )
    .expect("valid fixture")
}

/// Degenerate Lyapunov case: no control influence on the dynamics or cost
/// coupling (`B = D = S = 0`), `L = 2` so that `L̃ Λ̄ = I` at λ = 1/2.
pub fn lyapunov_pair(steps: usize) -> LqScenarioSet {
    let z = scalar(0.0);
    let sc = LqScenario::constant(
        steps,
        z.clone(),
        z.clone(),
        z.clone(),
        z.clone(),
        0.0,
        scalar(2.0),
        z.clone(),
        scalar(1.0),
        scalar(1.0),
    );
    LqScenarioSet::new(
        vec![sc.clone(), sc],
        vec![0.0; steps],
        DVector::from_element(1, 1.0),
        grid_1(steps),
    )
    .expect("valid fixture")
}

/// Zero cost weights (`G = L = S = 0`, `R = 1`): the Riccati solution and
/// the feedback vanish identically.
pub fn zero_cost_pair(steps: usize) -> LqScenarioSet {
    let z = scalar(0.0);
    let sc = LqScenario::constant(
        steps,
        z.clone(),
        scalar(1.0),
        z.clone(),
        z.clone(),
        0.0,
        z.clone(),
        z.clone(),
        scalar(1.0),
        z.clone(),
    );
    LqScenarioSet::new(
        vec![sc.clone(), sc],
        vec![0.0; steps],
        DVector::from_element(1, 1.0),
        grid_1(steps),
    )
    .expect("valid fixture")
}

/// Deterministic interior-branch instance with opposed control channels:
/// the control pushes scenario 1 down and scenario 2 up (`B_2 = -B_1`),
/// with terminal weights `G_1 = 2`, `G_2 = 1` and all noise off. The
/// worst-case weight sits strictly inside `(0, 1)` near 0.475.
pub fn bull_bear(steps: usize) -> LqScenarioSet {
    let z = scalar(0.0);
    let mk = |b: f64, g: f64| {
        LqScenario::constant(
            steps,
            z.clone(),
            scalar(b),
            z.clone(),
            z.clone(),
            0.0,
            z.clone(),
            z.clone(),
            scalar(1.0),
            scalar(g),
        )
    };
    LqScenarioSet::new(
        vec![mk(1.0, 2.0), mk(-1.0, 1.0)],
        vec![0.0; steps],
        DVector::from_element(1, 1.0),
        grid_1(steps),
    )
    .expect("valid fixture")
}

/// The opposed-channel pair with state and control noise switched on;
/// stays on the interior branch with a seed-dependent Monte Carlo estimate
/// of the worst-case weight.
pub fn bull_bear_noisy(steps: usize) -> LqScenarioSet {
    let z = scalar(0.0);
    let mk = |b: f64, g: f64| {
        LqScenario::constant(
            steps,
            z.clone(),
            scalar(b),
            scalar(0.3),
            scalar(0.1),
            0.0,
            z.clone(),
            z.clone(),
            scalar(1.0),
            scalar(g),
        )
    };
    LqScenarioSet::new(
        vec![mk(1.0, 2.0), mk(-1.0, 1.0)],
        vec![0.0; steps],
        DVector::from_element(1, 1.0),
        grid_1(steps),
    )
    .expect("valid fixture")
}

/// Stochastic interior-branch instance whose two scenarios swap the labels
/// of the two control channels (`R_1 = diag(1, 2)` against `diag(2, 1)`,
/// matching swaps in `B` and `D`). Swapping the scenarios and replacing λ
/// by 1 − λ maps the problem onto itself, so the worst-case weight is
/// exactly 1/2 while the per-λ costs remain genuinely distinct.
pub fn channel_swap(steps: usize) -> LqScenarioSet {
    let mk = |b: [f64; 2], d: [f64; 2], r: [f64; 2]| {
        LqScenario::constant(
            steps,
            scalar(0.2),
            DMatrix::from_row_slice(1, 2, &b),
            scalar(0.2),
            DMatrix::from_row_slice(1, 2, &d),
            0.1,
            scalar(1.0),
            DMatrix::zeros(2, 1),
            DMatrix::from_diagonal(&DVector::from_row_slice(&r)),
            scalar(1.0),
        )
    };
    LqScenarioSet::new(
        vec![
            mk([1.0, 0.3], [0.1, 0.0], [1.0, 2.0]),
            mk([0.3, 1.0], [0.0, 0.1], [2.0, 1.0]),
        ],
        vec![0.1; steps],
        DVector::from_element(1, 1.0),
        grid_1(steps),
    )
    .expect("valid fixture")
}

/// Identical scenarios with every term switched on (state and control noise,
/// discounting, cross cost): exercises common-random-number coupling.
pub fn noisy_identical(steps: usize) -> LqScenarioSet {
    let sc = LqScenario::constant(
        steps,
        scalar(0.1),
        scalar(1.0),
        scalar(0.3),
        scalar(0.2),
        0.2,
        scalar(0.5),
        scalar(0.1),
        scalar(1.0),
        scalar(1.0),
    );
    LqScenarioSet::new(
        vec![sc.clone(), sc],
        vec![0.3; steps],
        DVector::from_element(1, 1.0),
        grid_1(steps),
    )
    .expect("valid fixture")
}

/// Uniform draw in `[lo, hi)` from raw ChaCha output.
fn uniform(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    let u = ((rng.next_u64() >> 11) as f64 + 0.5) / 9007199254740992.0;
    lo + (hi - lo) * u
}

fn random_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| uniform(rng, -scale, scale))
}

/// Random PSD matrix `M'M` with entries of roughly unit scale.
fn random_psd(rng: &mut ChaCha12Rng, dim: usize, scale: f64) -> DMatrix<f64> {
    let m = random_matrix(rng, dim, dim, scale);
    m.transpose() * m
}

/// Seeded random two-scenario instance passing both assumption
/// validators by
/// construction: `R_θ = δI + W'W`, `L_θ = S_θ' R_θ^{-1} S_θ + V'V`,
/// `G_θ = U'U`, bounded random dynamics, constant-in-time tables.
pub fn random_validated(seed: u64, n_max: usize, k_max: usize, steps: usize) -> LqScenarioSet {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = 1 + (rng.next_u64() as usize) % n_max;
    let k = 1 + (rng.next_u64() as usize) % k_max;
    let delta = 0.3;

    let mut scenarios = Vec::with_capacity(2);
    for _ in 0..2 {
        let a = random_matrix(&mut rng, n, n, 0.8);
        let b = random_matrix(&mut rng, n, k, 0.8);
        let c = random_matrix(&mut rng, n, n, 0.5);
        let d = random_matrix(&mut rng, n, k, 0.4);
        let e = uniform(&mut rng, -0.5, 0.5);
        let s = random_matrix(&mut rng, k, n, 0.3);
        let r = DMatrix::identity(k, k) * delta + random_psd(&mut rng, k, 0.6);
        let r_inv_s = r
            .clone()
            .cholesky()
            .expect("R is positive definite by construction")
            .solve(&s);
        let l = s.transpose() * r_inv_s + random_psd(&mut rng, n, 0.7);
        let g = random_psd(&mut rng, n, 0.8);
        scenarios.push(LqScenario::constant(steps, a, b, c, d, e, l, s, r, g));
    }
    let f = uniform(&mut rng, -0.5, 0.5);
    let x0 = DVector::from_fn(n, |_, _| uniform(&mut rng, 0.5, 1.5));
    LqScenarioSet::new(scenarios, vec![f; steps], x0, grid_1(steps))
        .expect("generated instance is structurally valid")
}
