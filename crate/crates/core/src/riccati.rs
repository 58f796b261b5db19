//! The stacked two-scenario block system and its backward matrix Riccati
//! equation.
//!
//! For a mixture weight λ the two scenario states are stacked into one
//! 2n-dimensional system with block-diagonal drift/diffusion, the running
//! and terminal cost weights absorb the deterministic discount factors
//! `m̃_θ(t) = exp(∫ E_θ ds)`, and the control weight aggregates to
//! `R^λ = λ m̃_1 R_1 + (1-λ) m̃_2 R_2`. The optimal feedback is
//! `u = -K(t) x̄` with
//!
//! ```text
//! K = (R^λ + D'PD)^{-1} ((B + DF)'P + D'P C̃ + S Λ̄)
//! ```
//!
//! where `P` solves, backward from `P(T) = Λ̄ G̃`,
//!
//! ```text
//! Ṗ + P(Ã + F C̃) + (Ã + F C̃)'P + C̃'P C̃ + L̃ Λ̄
//!   - (P(B + DF) + Λ̄ S' + C̃'PD)(R^λ + D'PD)^{-1}((B + DF)'P + D'P C̃ + S Λ̄) = 0.
//! ```

use nalgebra::DMatrix;

use crate::bsde::deterministic_factor;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg;
use crate::scenario::{LqScenarioSet, MatrixTable};

/// Default substep refinement of the Riccati integrator relative to the
/// simulation grid.
pub const DEFAULT_REFINE: usize = 4;

/// Floor on the smallest eigenvalue of `R^λ + D'PD` before the integration
/// aborts with a singularity error.
pub const DELTA_FLOOR: f64 = 1e-10;

/// Blow-up threshold on the entrywise norm of `P`.
const P_BLOWUP: f64 = 1e12;

/// Stacked coefficient system for a fixed mixture weight λ.
///
/// Step-indexed tables (`a_tilde`, `c_tilde`, `b`, `d`, `l_tilde`, `s`) hold
/// the value on `[t_i, t_{i+1})`; `r_lambda` and the `m̃_θ` factors are kept
/// per node so that terminal quantities are available, with the coefficient
/// tables extended left-continuously at `t = T`.
#[derive(Debug, Clone)]
pub struct BlockSystem {
    pub n: usize,
    pub k: usize,
    pub lambda: f64,
    pub grid: TimeGrid,
    /// `diag(A_1, A_2)`, per step.
    pub a_tilde: MatrixTable,
    /// `diag(C_1, C_2)`, per step.
    pub c_tilde: MatrixTable,
    /// `[B_1; B_2]`, per step.
    pub b: MatrixTable,
    /// `[D_1; D_2]`, per step.
    pub d: MatrixTable,
    /// `diag(m̃_1 L_1, m̃_2 L_2)`, per step.
    pub l_tilde: MatrixTable,
    /// `diag(m̃_1(T) G_1, m̃_2(T) G_2)`.
    pub g_tilde: DMatrix<f64>,
    /// `[m̃_1 S_1, m̃_2 S_2]`, per step.
    pub s: MatrixTable,
    /// `λ m̃_1 R_1 + (1-λ) m̃_2 R_2`, per node.
    pub r_lambda: MatrixTable,
    /// `diag(λ I_n, (1-λ) I_n)`.
    pub lambda_bar: DMatrix<f64>,
    /// Shared BSDE diffusion coefficient, per step.
    pub f: Vec<f64>,
    /// `m̃_θ` per node, θ = 1, 2.
    pub m_tilde: [Vec<f64>; 2],
}

/// Assemble the stacked system at weight `lambda` for a two-scenario set.
pub fn assemble_blocks(set: &LqScenarioSet, lambda: f64) -> Result<BlockSystem> {
    if set.count() != 2 {
        return Err(Error::Unsupported(format!(
            "block assembly needs exactly two scenarios, got {}",
            set.count()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Input(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let grid = set.grid;
    let steps = grid.steps();
    let dt = grid.dt();
    let (n, k) = (set.n, set.k);
    let (s1, s2) = (&set.scenarios[0], &set.scenarios[1]);
    let m1 = deterministic_factor(&s1.e, dt);
    let m2 = deterministic_factor(&s2.e, dt);

    let mut a_tilde = Vec::with_capacity(steps);
    let mut c_tilde = Vec::with_capacity(steps);
    let mut b = Vec::with_capacity(steps);
    let mut d = Vec::with_capacity(steps);
    let mut l_tilde = Vec::with_capacity(steps);
    let mut s = Vec::with_capacity(steps);
    let mut r_lambda = Vec::with_capacity(steps + 1);

    for i in 0..steps {
        a_tilde.push(block_diag(&s1.a[i], &s2.a[i]));
        c_tilde.push(block_diag(&s1.c[i], &s2.c[i]));
        b.push(stack_vertical(&s1.b[i], &s2.b[i]));
        d.push(stack_vertical(&s1.d[i], &s2.d[i]));
        l_tilde.push(block_diag(&(&s1.l[i] * m1[i]), &(&s2.l[i] * m2[i])));
        s.push(stack_horizontal(&(&s1.s[i] * m1[i]), &(&s2.s[i] * m2[i])));
        r_lambda.push(&s1.r[i] * (lambda * m1[i]) + &s2.r[i] * ((1.0 - lambda) * m2[i]));
    }
    // left-continuous extension of R at the terminal node
    r_lambda.push(
        &s1.r[steps - 1] * (lambda * m1[steps]) + &s2.r[steps - 1] * ((1.0 - lambda) * m2[steps]),
    );
    let g_tilde = block_diag(&(&s1.g * m1[steps]), &(&s2.g * m2[steps]));

    let mut lambda_bar = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        lambda_bar[(i, i)] = lambda;
        lambda_bar[(n + i, n + i)] = 1.0 - lambda;
    }

    Ok(BlockSystem {
        n,
        k,
        lambda,
        grid,
        a_tilde,
        c_tilde,
        b,
        d,
        l_tilde,
        g_tilde,
        s,
        r_lambda,
        lambda_bar,
        f: set.f.clone(),
        m_tilde: [m1, m2],
    })
}

fn block_diag(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let (r1, c1) = top.shape();
    let (r2, c2) = bottom.shape();
    let mut out = DMatrix::zeros(r1 + r2, c1 + c2);
    out.view_mut((0, 0), (r1, c1)).copy_from(top);
    out.view_mut((r1, c1), (r2, c2)).copy_from(bottom);
    out
}

fn stack_vertical(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let (r1, c) = top.shape();
    let r2 = bottom.nrows();
    let mut out = DMatrix::zeros(r1 + r2, c);
    out.view_mut((0, 0), (r1, c)).copy_from(top);
    out.view_mut((r1, 0), (r2, c)).copy_from(bottom);
    out
}

fn stack_horizontal(left: &DMatrix<f64>, right: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c1) = left.shape();
    let c2 = right.ncols();
    let mut out = DMatrix::zeros(r, c1 + c2);
    out.view_mut((0, 0), (r, c1)).copy_from(left);
    out.view_mut((0, c1), (r, c2)).copy_from(right);
    out
}

/// Solution of the Riccati equation at one weight: `P` and the feedback
/// gains `K` at every simulation node, with definiteness diagnostics.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub lambda: f64,
    pub grid: TimeGrid,
    /// Symmetric `2n × 2n` value matrix at every node.
    pub p: Vec<DMatrix<f64>>,
    /// Feedback gain `k × 2n` at every node; `u = -K x̄`.
    pub gains: Vec<DMatrix<f64>>,
    /// Min eigenvalue of `P` per node.
    pub min_eig_p: Vec<f64>,
    /// Min eigenvalue of `R^λ + D'PD` per node.
    pub min_eig_r: Vec<f64>,
}

impl RiccatiSolution {
    pub fn min_eig_p_global(&self) -> f64 {
        self.min_eig_p.iter().fold(f64::INFINITY, |a, v| a.min(*v))
    }

    pub fn min_eig_r_global(&self) -> f64 {
        self.min_eig_r.iter().fold(f64::INFINITY, |a, v| a.min(*v))
    }
}

/// Backward RK4 integration of the Riccati equation with `refine` substeps
/// per simulation step and per-stage symmetrization.
pub fn solve_riccati(blocks: &BlockSystem, refine: usize) -> Result<RiccatiSolution> {
    solve_riccati_with_options(blocks, refine, true)
}

/// As [`solve_riccati`], optionally disabling the per-stage symmetrization
/// (the symmetry-drift diagnostics use this; production callers keep it on).
pub fn solve_riccati_with_options(
    blocks: &BlockSystem,
    refine: usize,
    symmetrize: bool,
) -> Result<RiccatiSolution> {
    if refine == 0 {
        return Err(Error::Input("refine must be >= 1".into()));
    }
    let grid = blocks.grid;
    let steps = grid.steps();
    let h = grid.dt() / refine as f64;
    let dim = 2 * blocks.n;

    let mut p = blocks.lambda_bar.clone() * &blocks.g_tilde;
    // Λ̄ G̃ is symmetric (both diagonal-block scaled); enforce exactly.
    p = linalg::symmetrize(&p);
    let mut p_nodes = vec![DMatrix::zeros(dim, dim); steps + 1];
    p_nodes[steps] = p.clone();

    for i in (0..steps).rev() {
        // coefficients frozen on [t_i, t_{i+1})
        let afc = &blocks.a_tilde[i] + &blocks.c_tilde[i] * blocks.f[i];
        let bdf = &blocks.b[i] + &blocks.d[i] * blocks.f[i];
        let s_lam = &blocks.s[i] * &blocks.lambda_bar;
        let l_lam = &blocks.l_tilde[i] * &blocks.lambda_bar;
        let c = &blocks.c_tilde[i];
        let d = &blocks.d[i];
        let r = &blocks.r_lambda[i];

        let pdot = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            let r_hat = r + d.transpose() * p * d;
            let min_eig = linalg::min_eig_sym(&r_hat);
            if min_eig < DELTA_FLOOR {
                return Err(Error::RiccatiSingular {
                    time: grid.node(i),
                    detail: format!("min eig(R^λ + D'PD) = {min_eig:.3e}"),
                });
            }
            let gain_rhs = bdf.transpose() * p + d.transpose() * p * c + &s_lam;
            let gain_lhs = p * &bdf + s_lam.transpose() + c.transpose() * p * d;
            let inv_term =
                linalg::spd_solve(&r_hat, &gain_rhs).ok_or_else(|| Error::RiccatiSingular {
                    time: grid.node(i),
                    detail: "Cholesky of R^λ + D'PD failed".into(),
                })?;
            let mut rhs = p * &afc + afc.transpose() * p + c.transpose() * p * c + &l_lam
                - gain_lhs * inv_term;
            if symmetrize {
                rhs = linalg::symmetrize(&rhs);
            }
            // Riccati: Ṗ = -rhs
            Ok(-rhs)
        };

        for _ in 0..refine {
            let k1 = pdot(&p)?;
            let k2 = pdot(&(&p - &k1 * (h / 2.0)))?;
            let k3 = pdot(&(&p - &k2 * (h / 2.0)))?;
            let k4 = pdot(&(&p - &k3 * h))?;
            p -= (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            if symmetrize {
                p = linalg::symmetrize(&p);
            }
            let norm = linalg::max_abs(&p);
            if !norm.is_finite() || norm > P_BLOWUP {
                return Err(Error::RiccatiBlowup {
                    time: grid.node(i),
                    norm,
                });
            }
        }
        p_nodes[i] = p.clone();
    }

    // gains and diagnostics at the simulation nodes
    let mut gains = Vec::with_capacity(steps + 1);
    let mut min_eig_p = Vec::with_capacity(steps + 1);
    let mut min_eig_r = Vec::with_capacity(steps + 1);
    for (node, p_i) in p_nodes.iter().enumerate() {
        let step = node.min(steps - 1);
        let bdf = &blocks.b[step] + &blocks.d[step] * blocks.f[step];
        let s_lam = &blocks.s[step] * &blocks.lambda_bar;
        let d = &blocks.d[step];
        let r_hat = &blocks.r_lambda[node] + d.transpose() * p_i * d;
        let min_r = linalg::min_eig_sym(&r_hat);
        if min_r < DELTA_FLOOR {
            return Err(Error::RiccatiSingular {
                time: grid.node(node),
                detail: format!("min eig(R^λ + D'PD) = {min_r:.3e} at a node"),
            });
        }
        let rhs = bdf.transpose() * p_i + d.transpose() * p_i * &blocks.c_tilde[step] + &s_lam;
        let gain = linalg::spd_solve(&r_hat, &rhs).ok_or_else(|| Error::RiccatiSingular {
            time: grid.node(node),
            detail: "Cholesky of R^λ + D'PD failed at a node".into(),
        })?;
        gains.push(gain);
        min_eig_p.push(linalg::min_eig_sym(p_i));
        min_eig_r.push(min_r);
    }

    Ok(RiccatiSolution {
        lambda: blocks.lambda,
        grid,
        p: p_nodes,
        gains,
        min_eig_p,
        min_eig_r,
    })
}

/// Margin report for the aggregated definiteness condition
/// `L̃ Λ̄ − Λ̄ S' (R^λ)^{-1} S Λ̄ ⪰ 0`.
#[derive(Debug, Clone)]
pub struct AggregateMarginReport {
    pub pass: bool,
    pub min_margin: f64,
    pub worst_step: usize,
    pub margins: Vec<f64>,
}

/// Stepwise minimum eigenvalue of `L̃ Λ̄ − Λ̄ S' (R^λ)^{-1} S Λ̄`.
pub fn check_h7_aggregate(blocks: &BlockSystem) -> AggregateMarginReport {
    let steps = blocks.grid.steps();
    let mut margins = Vec::with_capacity(steps);
    let mut min_margin = f64::INFINITY;
    let mut worst_step = 0;
    let mut tol = 0.0_f64;
    for i in 0..steps {
        let s_lam = &blocks.s[i] * &blocks.lambda_bar;
        let m = match linalg::spd_solve(&blocks.r_lambda[i], &s_lam) {
            Some(r_inv_s) => &blocks.l_tilde[i] * &blocks.lambda_bar - s_lam.transpose() * r_inv_s,
            None => {
                margins.push(f64::NEG_INFINITY);
                min_margin = f64::NEG_INFINITY;
                worst_step = i;
                continue;
            }
        };
        let margin = linalg::min_eig_sym(&m);
        tol = tol.max(linalg::psd_tolerance(&m));
        margins.push(margin);
        if margin < min_margin {
            min_margin = margin;
            worst_step = i;
        }
    }
    AggregateMarginReport {
        pass: min_margin >= -tol,
        min_margin,
        worst_step,
        margins,
    }
}

/// Difference-quotient probe for the λ-Lipschitz bound on `P^λ`.
#[derive(Debug, Clone)]
pub struct LipschitzProbe {
    /// `max_t |P^{λ_i} − P^{λ_{i+1}}|_∞ / |λ_i − λ_{i+1}|` per consecutive pair.
    pub pair_ratios: Vec<f64>,
    /// Same quotients restricted to `t = T`.
    pub terminal_ratios: Vec<f64>,
    pub max_ratio: f64,
}

/// Solve the Riccati equation along `lambdas` and measure the difference
/// quotients `|P^λ − P^{λ'}|_∞ / |λ − λ'|` over consecutive pairs.
pub fn lambda_lipschitz_probe(
    set: &LqScenarioSet,
    lambdas: &[f64],
    refine: usize,
) -> Result<LipschitzProbe> {
    if lambdas.len() < 3 {
        return Err(Error::Input(format!(
            "need at least 3 lambda values, got {}",
            lambdas.len()
        )));
    }
    let solutions: Vec<RiccatiSolution> = lambdas
        .iter()
        .map(|&lam| solve_riccati(&assemble_blocks(set, lam)?, refine))
        .collect::<Result<_>>()?;
    let mut pair_ratios = Vec::with_capacity(lambdas.len() - 1);
    let mut terminal_ratios = Vec::with_capacity(lambdas.len() - 1);
    for w in solutions.windows(2) {
        let dl = (w[0].lambda - w[1].lambda).abs();
        if dl == 0.0 {
            return Err(Error::Input("duplicate lambda values in probe".into()));
        }
        let mut max_diff: f64 = 0.0;
        for (pa, pb) in w[0].p.iter().zip(w[1].p.iter()) {
            max_diff = max_diff.max(linalg::max_abs(&(pa - pb)));
        }
        pair_ratios.push(max_diff / dl);
        let last = w[0].p.len() - 1;
        terminal_ratios.push(linalg::max_abs(&(&w[0].p[last] - &w[1].p[last])) / dl);
    }
    let max_ratio = pair_ratios.iter().fold(0.0_f64, |a, v| a.max(*v));
    Ok(LipschitzProbe {
        pair_ratios,
        terminal_ratios,
        max_ratio,
    })
}
