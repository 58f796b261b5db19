//! Robust linear-quadratic recursive control under two-scenario model
//! uncertainty.
//!
//! The library solves the minimax problem `min_u max(y_1(0), y_2(0))` where
//! each `y_θ(0)` is the recursive (BSDE-defined) cost of a controlled linear
//! diffusion under scenario θ, and numerically verifies the first-order
//! optimality theory behind the solution: variational systems, adjoint
//! processes, duality, Hamiltonian stationarity and directional derivatives
//! of the worst-case cost.
//!
//! The main pipeline:
//!
//! 1. [`scenario`] — scenario data, the time grid, assumption validators,
//!    and the scenario file format.
//! 2. [`sde`] — reproducible Brownian ensembles and Euler simulation.
//! 3. [`bsde`] — recursive cost evaluation: the exponential weight process,
//!    an exact representation solver for drivers linear in `(y, z)`, and a
//!    least-squares regression solver for nonlinear toy drivers.
//! 4. [`riccati`] — the stacked two-scenario block system and the backward
//!    matrix Riccati ODE for a fixed mixture weight λ.
//! 5. [`robust`] — the worst-case weight λ*, feedback synthesis, closed-loop
//!    costs, and the robust solution report.
//! 6. [`verify`] — numerical checks of the maximum principle at the solved
//!    control.

pub mod bsde;
pub mod error;
pub mod grid;
pub mod instances;
pub mod linalg;
pub mod report;
pub mod riccati;
pub mod robust;
pub mod scenario;
pub mod sde;
pub mod verify;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use report::{CheckResult, SolutionReport, ValidationReport, VerifyReport, SCHEMA_VERSION};
pub use scenario::{
    load_scenario_file, save_scenario_file, validate_derivatives, validate_h6, validate_h7,
    GeneralScenario, GeneralScenarioSet, LoadedScenario, LqScenario, LqScenarioSet,
};
pub use sde::{generate_paths, ControlPath, OpenLoopControl, PathEnsemble, StatePaths};
