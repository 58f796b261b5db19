//! Scenario data: per-θ coefficient bundles, the shared time grid, and
//! validators for the standing assumptions.
//!
//! Two scenario classes exist. [`LqScenario`] holds step-indexed coefficient
//! tables for the linear-quadratic problem
//!
//! ```text
//! dx = (A x + B u) dt + (C x + D u) dW
//! y(t) = 1/2 <G x(T), x(T)> + ∫ [E y + F z + 1/2(<L x, x> + 2 <S x, u> + <R u, u>)] ds - ∫ z dW
//! ```
//!
//! with scalar noise (`d = 1`) and the table `F` shared across scenarios so
//! the aggregated Riccati equation stays an ODE. [`GeneralScenario`] carries
//! user closures for the coefficients of a general controlled FBSDE together
//! with their first derivatives, and only needs to satisfy the Lipschitz and
//! differentiability assumptions probed by [`validate_derivatives`].

mod file;

pub use file::{load_scenario_file, save_scenario_file, LoadedScenario};

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg;
use crate::report::ValidationReport;

/// Step-indexed matrix table, one entry per step of the grid.
pub type MatrixTable = Vec<DMatrix<f64>>;

/// Coefficient bundle of one linear-quadratic scenario.
///
/// Symmetry of `L`, `R` and `G` is enforced at construction by
/// `(M + M^T)/2`; the largest asymmetry seen is kept for reporting.
#[derive(Debug, Clone)]
pub struct LqScenario {
    pub a: MatrixTable,
    pub b: MatrixTable,
    pub c: MatrixTable,
    pub d: MatrixTable,
    pub e: Vec<f64>,
    pub l: MatrixTable,
    pub s: MatrixTable,
    pub r: MatrixTable,
    pub g: DMatrix<f64>,
    /// Max asymmetry observed before symmetrization, per symmetric table.
    pub asymmetry: SymmetryResiduals,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SymmetryResiduals {
    pub l: f64,
    pub r: f64,
    pub g: f64,
}

impl SymmetryResiduals {
    pub fn max(&self) -> f64 {
        self.l.max(self.r).max(self.g)
    }
}

impl LqScenario {
    /// Build a scenario from raw tables, symmetrizing the quadratic-cost
    /// matrices and recording their asymmetry.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: MatrixTable,
        b: MatrixTable,
        c: MatrixTable,
        d: MatrixTable,
        e: Vec<f64>,
        l: MatrixTable,
        s: MatrixTable,
        r: MatrixTable,
        g: DMatrix<f64>,
    ) -> Self {
        let mut asym = SymmetryResiduals::default();
        let l = l
            .into_iter()
            .map(|m| {
                asym.l = asym.l.max(linalg::asymmetry(&m));
                linalg::symmetrize(&m)
            })
            .collect();
        let r = r
            .into_iter()
            .map(|m| {
                asym.r = asym.r.max(linalg::asymmetry(&m));
                linalg::symmetrize(&m)
            })
            .collect();
        asym.g = linalg::asymmetry(&g);
        let g = linalg::symmetrize(&g);
        Self {
            a,
            b,
            c,
            d,
            e,
            l,
            s,
            r,
            g,
            asymmetry: asym,
        }
    }

    /// Constant-in-time scenario from single matrices.
    #[allow(clippy::too_many_arguments)]
    pub fn constant(
        steps: usize,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        e: f64,
        l: DMatrix<f64>,
        s: DMatrix<f64>,
        r: DMatrix<f64>,
        g: DMatrix<f64>,
    ) -> Self {
        Self::new(
            vec![a; steps],
            vec![b; steps],
            vec![c; steps],
            vec![d; steps],
            vec![e; steps],
            vec![l; steps],
            vec![s; steps],
            vec![r; steps],
            g,
        )
    }
}

/// A family of LQ scenarios sharing the grid, the initial state and the
/// BSDE diffusion coefficient `F`.
///
/// Immutable after construction; all solvers take it by shared reference.
#[derive(Debug, Clone)]
pub struct LqScenarioSet {
    pub scenarios: Vec<LqScenario>,
    /// Shared step-indexed `F` table (kept once, not per scenario).
    pub f: Vec<f64>,
    pub x0: DVector<f64>,
    pub grid: TimeGrid,
    pub n: usize,
    pub k: usize,
}

impl LqScenarioSet {
    pub fn new(
        scenarios: Vec<LqScenario>,
        f: Vec<f64>,
        x0: DVector<f64>,
        grid: TimeGrid,
    ) -> Result<Self> {
        if scenarios.is_empty() {
            return Err(Error::Structural("scenario set is empty".into()));
        }
        let n = x0.len();
        let k = scenarios[0]
            .b
            .first()
            .map(|m| m.ncols())
            .ok_or_else(|| Error::Structural("scenario 1 table B is empty".into()))?;
        let steps = grid.steps();
        if f.len() != steps {
            return Err(Error::Structural(format!(
                "table F: expected {steps} entries, got {}",
                f.len()
            )));
        }
        for (idx, sc) in scenarios.iter().enumerate() {
            let theta = idx + 1;
            check_table(theta, "A", &sc.a, steps, n, n)?;
            check_table(theta, "B", &sc.b, steps, n, k)?;
            check_table(theta, "C", &sc.c, steps, n, n)?;
            check_table(theta, "D", &sc.d, steps, n, k)?;
            check_table(theta, "L", &sc.l, steps, n, n)?;
            check_table(theta, "S", &sc.s, steps, k, n)?;
            check_table(theta, "R", &sc.r, steps, k, k)?;
            if sc.e.len() != steps {
                return Err(Error::Structural(format!(
                    "scenario {theta} table E: expected {steps} entries, got {}",
                    sc.e.len()
                )));
            }
            if sc.g.shape() != (n, n) {
                return Err(Error::Structural(format!(
                    "scenario {theta} table G: expected {n}x{n}, got {}x{}",
                    sc.g.nrows(),
                    sc.g.ncols()
                )));
            }
        }
        Ok(Self {
            scenarios,
            f,
            x0,
            grid,
            n,
            k,
        })
    }

    pub fn count(&self) -> usize {
        self.scenarios.len()
    }

    /// New set with the scenario order swapped (K = 2 only).
    pub fn swapped(&self) -> Result<Self> {
        if self.count() != 2 {
            return Err(Error::Input("swap requires exactly two scenarios".into()));
        }
        let mut scenarios = self.scenarios.clone();
        scenarios.swap(0, 1);
        Self::new(scenarios, self.f.clone(), self.x0.clone(), self.grid)
    }
}

fn check_table(
    theta: usize,
    name: &str,
    table: &MatrixTable,
    steps: usize,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if table.len() != steps {
        return Err(Error::Structural(format!(
            "scenario {theta} table {name}: expected {steps} entries, got {}",
            table.len()
        )));
    }
    for (i, m) in table.iter().enumerate() {
        if m.shape() != (rows, cols) {
            return Err(Error::Structural(format!(
                "scenario {theta} table {name} step {i}: expected {rows}x{cols}, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    Ok(())
}

// --- general (non-LQ) scenarios -------------------------------------------

pub type StateFn = Box<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type StateMatFn = Box<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type StateMatListFn =
    Box<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync>;
pub type DriverFn =
    Box<dyn Fn(f64, &DVector<f64>, f64, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;
pub type DriverVecFn = Box<
    dyn Fn(f64, &DVector<f64>, f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync,
>;
pub type TerminalFn = Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type TerminalGradFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Coefficient evaluators of one general scenario: drift `b(t,x,u)`,
/// diffusion `σ(t,x,u)` (n×d), driver `f(t,x,y,z,u)`, terminal `φ(x)`, and
/// their first derivatives.
///
/// Derivative conventions: `drift_dx` is n×n with entry `(i,j) = ∂b_i/∂x_j`;
/// `diffusion_dx` returns one n×n matrix per diffusion column.
pub struct GeneralScenario {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub drift: StateFn,
    pub diffusion: StateMatFn,
    pub driver: DriverFn,
    pub terminal: TerminalFn,
    pub drift_dx: StateMatFn,
    pub drift_du: StateMatFn,
    pub diffusion_dx: StateMatListFn,
    pub diffusion_du: StateMatListFn,
    pub driver_dx: DriverVecFn,
    pub driver_dy: DriverFn,
    pub driver_dz: DriverVecFn,
    pub driver_du: DriverVecFn,
    pub terminal_dx: TerminalGradFn,
}

impl std::fmt::Debug for GeneralScenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneralScenario")
            .field("n", &self.n)
            .field("k", &self.k)
            .field("d", &self.d)
            .finish()
    }
}

/// A family of general scenarios sharing grid and initial state.
#[derive(Debug)]
pub struct GeneralScenarioSet {
    pub scenarios: Vec<GeneralScenario>,
    pub x0: DVector<f64>,
    pub grid: TimeGrid,
}

// --- validators ------------------------------------------------------------

/// Boundedness / symmetry / dimension report for the LQ coefficient
/// tables — the h6 block of the standing assumptions.
///
/// Construction already guarantees shapes; this checks that every entry is
/// finite, naming the offending table and step otherwise, and reports the
/// asymmetry absorbed at load time.
pub fn validate_h6(set: &LqScenarioSet) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (idx, sc) in set.scenarios.iter().enumerate() {
        let theta = idx + 1;
        let tables: [(&str, &MatrixTable); 7] = [
            ("A", &sc.a),
            ("B", &sc.b),
            ("C", &sc.c),
            ("D", &sc.d),
            ("L", &sc.l),
            ("S", &sc.s),
            ("R", &sc.r),
        ];
        for (name, table) in tables {
            let bad = table.iter().position(|m| !linalg::all_finite(m));
            match bad {
                None => report.push(
                    format!("scenario {theta} {name} finite"),
                    true,
                    0.0,
                    "all entries finite",
                ),
                Some(step) => report.push(
                    format!("scenario {theta} {name} finite"),
                    false,
                    f64::NAN,
                    format!("non-finite entry in table {name} at step {step}"),
                ),
            }
        }
        let bad_e = sc.e.iter().position(|v| !v.is_finite());
        report.push(
            format!("scenario {theta} E finite"),
            bad_e.is_none(),
            0.0,
            match bad_e {
                None => "all entries finite".to_string(),
                Some(step) => format!("non-finite entry in table E at step {step}"),
            },
        );
        report.push(
            format!("scenario {theta} G finite"),
            linalg::all_finite(&sc.g),
            0.0,
            "terminal weight",
        );
        let asym = sc.asymmetry.max();
        report.push(
            format!("scenario {theta} symmetry"),
            true,
            asym,
            "max asymmetry absorbed by (M + M^T)/2 at load",
        );
        if asym > 1e-12 {
            report.warn(format!(
                "scenario {theta}: symmetrized input tables with asymmetry {asym:.3e}"
            ));
        }
    }
    let bad_f = set.f.iter().position(|v| !v.is_finite());
    report.push(
        "shared F finite",
        bad_f.is_none(),
        0.0,
        match bad_f {
            None => "all entries finite".to_string(),
            Some(step) => format!("non-finite entry in table F at step {step}"),
        },
    );
    report.push(
        "dimensions consistent",
        true,
        0.0,
        format!("n = {}, k = {}, steps = {}", set.n, set.k, set.grid.steps()),
    );
    report.finish()
}

/// Definiteness checks of the h7 assumption block: `G_θ ⪰ 0`,
/// `R_θ(t) ⪰ δ I`, and
/// `L_θ(t) − S_θ^T R_θ^{-1}(t) S_θ(t) ⪰ 0` stepwise, reporting the worst
/// margins per scenario.
pub fn validate_h7(set: &LqScenarioSet, delta: f64) -> Result<ValidationReport> {
    if delta <= 0.0 {
        return Err(Error::Input(format!("delta must be > 0, got {delta}")));
    }
    let mut report = ValidationReport::default();
    for (idx, sc) in set.scenarios.iter().enumerate() {
        let theta = idx + 1;

        let g_margin = linalg::min_eig_sym(&sc.g);
        let g_tol = linalg::psd_tolerance(&sc.g);
        report.push(
            format!("scenario {theta} G >= 0"),
            g_margin >= -g_tol,
            g_margin,
            "min eigenvalue of the terminal weight",
        );

        let mut r_margin = f64::INFINITY;
        let mut r_worst = 0;
        let mut lsrs_margin = f64::INFINITY;
        let mut lsrs_worst = 0;
        let mut r_singular: Option<usize> = None;
        for (i, r) in sc.r.iter().enumerate() {
            let margin = linalg::min_eig_sym(r) - delta;
            if margin < r_margin {
                r_margin = margin;
                r_worst = i;
            }
            match linalg::spd_solve(r, &sc.s[i]) {
                Some(r_inv_s) => {
                    let m = &sc.l[i] - sc.s[i].transpose() * r_inv_s;
                    let margin = linalg::min_eig_sym(&m);
                    if margin < lsrs_margin {
                        lsrs_margin = margin;
                        lsrs_worst = i;
                    }
                }
                None => {
                    r_singular.get_or_insert(i);
                }
            }
        }
        report.push(
            format!("scenario {theta} R >= delta I"),
            r_margin >= 0.0,
            r_margin,
            format!("worst step {r_worst}, delta = {delta}"),
        );
        if let Some(step) = r_singular {
            report.push(
                format!("scenario {theta} L - S'R^-1 S >= 0"),
                false,
                f64::NEG_INFINITY,
                format!("R not positive definite at step {step}; R >> 0 fails"),
            );
        } else {
            let tol = linalg::psd_tolerance(&sc.l[lsrs_worst]);
            report.push(
                format!("scenario {theta} L - S'R^-1 S >= 0"),
                lsrs_margin >= -tol,
                lsrs_margin,
                format!("worst step {lsrs_worst}"),
            );
        }
    }
    Ok(report.finish())
}

/// Checks the supplied derivative evaluators of a [`GeneralScenario`]
/// against central finite differences at seeded random probe points.
///
/// Passes when the max relative error (relative to `max(|fd|, 1)`) stays
/// below `1e-4` with step `h = 1e-5`.
pub fn validate_derivatives(
    sc: &GeneralScenario,
    probes: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if probes == 0 {
        return Err(Error::Input("probes must be >= 1".into()));
    }
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 {
        // Box-Muller on two uniform draws; only the cosine branch is used.
        let u1 = ((rng.next_u64() >> 11) as f64 + 0.5) / 9007199254740992.0;
        let u2 = ((rng.next_u64() >> 11) as f64 + 0.5) / 9007199254740992.0;
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };

    let mut report = ValidationReport::default();
    let mut worst: [(f64, String); 8] = std::array::from_fn(|_| (0.0, String::new()));
    let names = [
        "drift_dx",
        "drift_du",
        "diffusion_dx",
        "diffusion_du",
        "driver_dx",
        "driver_dy",
        "driver_dz",
        "driver_du",
    ];
    let mut terminal_worst = (0.0_f64, String::new());
    let mut failure: Option<String> = None;

    for _ in 0..probes {
        let t = {
            let mut v = normal().abs();
            if !(v.is_finite()) {
                v = 0.5;
            }
            v.fract()
        };
        let x = DVector::from_fn(sc.n, |_, _| normal());
        let u = DVector::from_fn(sc.k, |_, _| normal());
        let y = normal();
        let z = DVector::from_fn(sc.d, |_, _| normal());
        let point = format!("t = {t:.4}, x = {:?}, u = {:?}", x.as_slice(), u.as_slice());

        // drift and diffusion derivatives in x and u
        let checks: [(usize, bool); 4] = [(0, true), (1, false), (2, true), (3, false)];
        for (slot, wrt_x) in checks {
            let dim = if wrt_x { sc.n } else { sc.k };
            for j in 0..dim {
                let mut hi = if wrt_x { x.clone() } else { u.clone() };
                let mut lo = hi.clone();
                hi[j] += H;
                lo[j] -= H;
                let (fp, fm, supplied): (Vec<f64>, Vec<f64>, Vec<f64>) = if slot < 2 {
                    let (xp, up) = if wrt_x { (&hi, &u) } else { (&x, &hi) };
                    let (xm, um) = if wrt_x { (&lo, &u) } else { (&x, &lo) };
                    let fp = (sc.drift)(t, xp, up);
                    let fm = (sc.drift)(t, xm, um);
                    let sup = if wrt_x {
                        (sc.drift_dx)(t, &x, &u)
                    } else {
                        (sc.drift_du)(t, &x, &u)
                    };
                    (
                        fp.as_slice().to_vec(),
                        fm.as_slice().to_vec(),
                        sup.column(j).iter().copied().collect(),
                    )
                } else {
                    let (xp, up) = if wrt_x { (&hi, &u) } else { (&x, &hi) };
                    let (xm, um) = if wrt_x { (&lo, &u) } else { (&x, &lo) };
                    let fp = (sc.diffusion)(t, xp, up);
                    let fm = (sc.diffusion)(t, xm, um);
                    let sup = if wrt_x {
                        (sc.diffusion_dx)(t, &x, &u)
                    } else {
                        (sc.diffusion_du)(t, &x, &u)
                    };
                    let mut fps = Vec::new();
                    let mut fms = Vec::new();
                    let mut sups = Vec::new();
                    for (col, s) in sup.iter().enumerate() {
                        for rowv in 0..sc.n {
                            fps.push(fp[(rowv, col)]);
                            fms.push(fm[(rowv, col)]);
                            sups.push(s[(rowv, j)]);
                        }
                    }
                    (fps, fms, sups)
                };
                for i in 0..fp.len() {
                    let fd = (fp[i] - fm[i]) / (2.0 * H);
                    if !fd.is_finite() || !supplied[i].is_finite() {
                        failure.get_or_insert(format!(
                            "{} produced non-finite value at probe {point}",
                            names[slot]
                        ));
                        continue;
                    }
                    let rel = (supplied[i] - fd).abs() / fd.abs().max(1.0);
                    if rel > worst[slot].0 {
                        worst[slot] = (rel, point.clone());
                    }
                }
            }
        }

        // driver derivatives in (x, y, z, u)
        let fd_scalar = |f_hi: f64, f_lo: f64| (f_hi - f_lo) / (2.0 * H);
        for j in 0..sc.n {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[j] += H;
            lo[j] -= H;
            let fd = fd_scalar(
                (sc.driver)(t, &hi, y, &z, &u),
                (sc.driver)(t, &lo, y, &z, &u),
            );
            let sup = (sc.driver_dx)(t, &x, y, &z, &u)[j];
            track(&mut worst[4], sup, fd, &point, &mut failure, "driver_dx");
        }
        {
            let fd = fd_scalar(
                (sc.driver)(t, &x, y + H, &z, &u),
                (sc.driver)(t, &x, y - H, &z, &u),
            );
            let sup = (sc.driver_dy)(t, &x, y, &z, &u);
            track(&mut worst[5], sup, fd, &point, &mut failure, "driver_dy");
        }
        for j in 0..sc.d {
            let mut hi = z.clone();
            let mut lo = z.clone();
            hi[j] += H;
            lo[j] -= H;
            let fd = fd_scalar(
                (sc.driver)(t, &x, y, &hi, &u),
                (sc.driver)(t, &x, y, &lo, &u),
            );
            let sup = (sc.driver_dz)(t, &x, y, &z, &u)[j];
            track(&mut worst[6], sup, fd, &point, &mut failure, "driver_dz");
        }
        for j in 0..sc.k {
            let mut hi = u.clone();
            let mut lo = u.clone();
            hi[j] += H;
            lo[j] -= H;
            let fd = fd_scalar(
                (sc.driver)(t, &x, y, &z, &hi),
                (sc.driver)(t, &x, y, &z, &lo),
            );
            let sup = (sc.driver_du)(t, &x, y, &z, &u)[j];
            track(&mut worst[7], sup, fd, &point, &mut failure, "driver_du");
        }

        // terminal gradient
        for j in 0..sc.n {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[j] += H;
            lo[j] -= H;
            let fd = fd_scalar((sc.terminal)(&hi), (sc.terminal)(&lo));
            let sup = (sc.terminal_dx)(&x)[j];
            track(
                &mut terminal_worst,
                sup,
                fd,
                &point,
                &mut failure,
                "terminal_dx",
            );
        }
    }

    for (slot, name) in names.iter().enumerate() {
        report.push(
            *name,
            worst[slot].0 <= TOL,
            worst[slot].0,
            if worst[slot].1.is_empty() {
                "no probe exercised this derivative".to_string()
            } else {
                format!("worst probe: {}", worst[slot].1)
            },
        );
    }
    report.push(
        "terminal_dx",
        terminal_worst.0 <= TOL,
        terminal_worst.0,
        if terminal_worst.1.is_empty() {
            "no probe exercised this derivative".to_string()
        } else {
            format!("worst probe: {}", terminal_worst.1)
        },
    );
    if let Some(msg) = failure {
        report.push("evaluator failure", false, f64::NAN, msg);
    }
    Ok(report.finish())
}

fn track(
    worst: &mut (f64, String),
    supplied: f64,
    fd: f64,
    point: &str,
    failure: &mut Option<String>,
    name: &str,
) {
    if !fd.is_finite() || !supplied.is_finite() {
        failure.get_or_insert(format!("{name} produced non-finite value at probe {point}"));
        return;
    }
    let rel = (supplied - fd).abs() / fd.abs().max(1.0);
    if rel > worst.0 {
        *worst = (rel, point.to_string());
    }
}
