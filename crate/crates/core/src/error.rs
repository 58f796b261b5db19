use thiserror::Error;

/// Errors surfaced by the solvers and validators.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed inputs: dimension mismatches, missing tables, bad shapes.
    #[error("structural error: {0}")]
    Structural(String),

    /// Out-of-range arguments (negative tolerances, too few levels, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A requested allocation would exceed the configured memory budget.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A simulated path left the admissible range (overflow guard).
    #[error("simulation diverged on path {path} at step {step}: {detail}")]
    Simulation {
        path: usize,
        step: usize,
        detail: String,
    },

    /// The control-weight matrix lost definiteness during Riccati integration.
    #[error("riccati singularity at t = {time:.6}: {detail}")]
    RiccatiSingular { time: f64, detail: String },

    /// The Riccati solution grew past the blow-up threshold.
    #[error("riccati blow-up at t = {time:.6}: |P| = {norm:.3e}")]
    RiccatiBlowup { time: f64, norm: f64 },

    /// Bisection exhausted its iteration budget with the gap still open.
    #[error("bisection did not converge: bracket [{lo}, {hi}], gap {gap:.3e}")]
    Convergence { lo: f64, hi: f64, gap: f64 },

    /// Operation not defined for this scenario class.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// Scenario file could not be read or parsed.
    #[error("scenario file: {0}")]
    ScenarioFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
