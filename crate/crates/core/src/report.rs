//! Machine-readable report types emitted by validators, the robust solver,
//! and the verification suite. All of these serialize to stable JSON with
//! field order fixed by declaration, so repeated runs with the same inputs
//! produce byte-identical documents.

use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// One named validation item with its margin or measured value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationItem {
    pub name: String,
    pub ok: bool,
    pub value: f64,
    pub detail: String,
}

/// Outcome of a validator (assumption checks, derivative probes, ...).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub items: Vec<ValidationItem>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn push(
        &mut self,
        name: impl Into<String>,
        ok: bool,
        value: f64,
        detail: impl Into<String>,
    ) {
        self.items.push(ValidationItem {
            name: name.into(),
            ok,
            value,
            detail: detail.into(),
        });
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        self.warnings.push(message.into());
    }

    /// Recompute the aggregate flag from the per-item flags.
    pub fn finish(mut self) -> Self {
        self.ok = self.items.iter().all(|i| i.ok);
        self
    }
}

/// One verification check: measured value against its pinned tolerance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub details: String,
}

/// Full verification report for a solved instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub pass: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn new(checks: Vec<CheckResult>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            pass: checks.iter().all(|c| c.pass),
            checks,
        }
    }
}

/// Per-scenario cost entry of a solution report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostEntry {
    pub theta: usize,
    pub y0: f64,
    pub stderr: f64,
}

/// Riccati diagnostics carried by the solution report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiccatiDiag {
    #[serde(rename = "min_eig_P")]
    pub min_eig_p: f64,
    #[serde(rename = "min_eig_R")]
    pub min_eig_r: f64,
}

/// JSON document describing a robust solution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionReport {
    pub schema_version: u32,
    pub lambda_star: f64,
    pub branch: String,
    pub costs: Vec<CostEntry>,
    pub robust_cost: f64,
    pub gap: f64,
    pub tol_gap: f64,
    pub riccati_diag: RiccatiDiag,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cross_check: Option<Vec<f64>>,
    pub config_digest: String,
}
