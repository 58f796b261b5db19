//! Scenario file format: a TOML document with one `[[scenario]]` section per
//! θ plus shared keys, and matrix tables given either inline (constant in
//! time, row-major) or as paths to CSV files with one row per time step.
//!
//! ```text
//! horizon = 1.0
//! steps = 400
//! n = 1
//! k = 1
//! d = 1
//! x0 = [1.0]
//! F = 0.0
//!
//! [[scenario]]
//! A = 0.0
//! B = 1.0
//! ...
//! G = 1.0
//! ```
//!
//! Unknown keys are rejected. All numbers are read as 64-bit floats.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::scenario::{LqScenario, LqScenarioSet, MatrixTable};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    horizon: f64,
    steps: usize,
    n: usize,
    k: usize,
    d: usize,
    x0: Vec<f64>,
    #[serde(rename = "F")]
    f: TableSpec,
    scenario: Vec<ScenarioSection>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioSection {
    #[serde(rename = "A")]
    a: TableSpec,
    #[serde(rename = "B")]
    b: TableSpec,
    #[serde(rename = "C")]
    c: TableSpec,
    #[serde(rename = "D")]
    d: TableSpec,
    #[serde(rename = "E")]
    e: TableSpec,
    #[serde(rename = "L")]
    l: TableSpec,
    #[serde(rename = "S")]
    s: TableSpec,
    #[serde(rename = "R")]
    r: TableSpec,
    #[serde(rename = "G")]
    g: TableSpec,
}

/// One coefficient table: a bare scalar (1×1 constant), an inline row-major
/// list (constant in time), or a path to a CSV file with `steps` rows.
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum TableSpec {
    Scalar(f64),
    Inline(Vec<f64>),
    Csv(String),
}

/// A parsed scenario set plus any load-time warnings (symmetrization).
#[derive(Debug)]
pub struct LoadedScenario {
    pub set: LqScenarioSet,
    pub warnings: Vec<String>,
}

/// Parse a scenario file. `steps_override`, when given, replaces the file's
/// `steps` value before tables are expanded; CSV-backed tables must match
/// the effective step count.
pub fn load_scenario_file(path: &Path, steps_override: Option<usize>) -> Result<LoadedScenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ScenarioFile(format!("{}: {e}", path.display())))?;
    let doc: ScenarioDoc = toml::from_str(&text)
        .map_err(|e| Error::ScenarioFile(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(PathBuf::from).unwrap_or_default();

    if doc.d != 1 {
        return Err(Error::ScenarioFile(format!(
            "LQ scenario files require d = 1 (scalar Brownian driver), got d = {}",
            doc.d
        )));
    }
    if doc.x0.len() != doc.n {
        return Err(Error::ScenarioFile(format!(
            "x0 has {} entries, expected n = {}",
            doc.x0.len(),
            doc.n
        )));
    }
    if doc.scenario.is_empty() {
        return Err(Error::ScenarioFile("no [[scenario]] sections".into()));
    }
    let steps = steps_override.unwrap_or(doc.steps);
    let grid = TimeGrid::new(doc.horizon, steps)?;
    let (n, k) = (doc.n, doc.k);

    let f = expand_scalar_table(&doc.f, steps, &base, "F")?;
    let mut scenarios = Vec::with_capacity(doc.scenario.len());
    let mut warnings = Vec::new();
    for (idx, sec) in doc.scenario.iter().enumerate() {
        let theta = idx + 1;
        let label = |name: &str| format!("scenario {theta} table {name}");
        let a = expand_table(&sec.a, steps, n, n, &base, &label("A"))?;
        let b = expand_table(&sec.b, steps, n, k, &base, &label("B"))?;
        let c = expand_table(&sec.c, steps, n, n, &base, &label("C"))?;
        let d = expand_table(&sec.d, steps, n, k, &base, &label("D"))?;
        let e = expand_scalar_table(&sec.e, steps, &base, &label("E"))?;
        let l = expand_table(&sec.l, steps, n, n, &base, &label("L"))?;
        let s = expand_table(&sec.s, steps, k, n, &base, &label("S"))?;
        let r = expand_table(&sec.r, steps, k, k, &base, &label("R"))?;
        let g = expand_table(&sec.g, 1, n, n, &base, &label("G"))?.remove(0);
        let sc = LqScenario::new(a, b, c, d, e, l, s, r, g);
        for (table, asym) in [
            ("L", sc.asymmetry.l),
            ("R", sc.asymmetry.r),
            ("G", sc.asymmetry.g),
        ] {
            if asym > 1e-12 {
                warnings.push(format!(
                    "scenario {theta}: table {table} symmetrized, asymmetry {asym:.3e}"
                ));
            }
        }
        scenarios.push(sc);
    }

    let set = LqScenarioSet::new(scenarios, f, DVector::from_vec(doc.x0), grid)?;
    Ok(LoadedScenario { set, warnings })
}

/// Serialize a scenario set back to a TOML file. Tables constant in time
/// are written inline; time-varying tables are written to CSV sidecars next
/// to the output file. Loading the result reproduces the tables bit for bit.
pub fn save_scenario_file(set: &LqScenarioSet, path: &Path) -> Result<()> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("scenario")
        .to_string();
    let dir = path.parent().map(PathBuf::from).unwrap_or_default();

    let mut sections = Vec::new();
    for (idx, sc) in set.scenarios.iter().enumerate() {
        let theta = idx + 1;
        let tag = |name: &str| format!("{stem}_s{theta}_{name}.csv");
        sections.push(ScenarioSection {
            a: emit_table(&sc.a, &dir, &tag("A"))?,
            b: emit_table(&sc.b, &dir, &tag("B"))?,
            c: emit_table(&sc.c, &dir, &tag("C"))?,
            d: emit_table(&sc.d, &dir, &tag("D"))?,
            e: emit_scalar_table(&sc.e, &dir, &tag("E"))?,
            l: emit_table(&sc.l, &dir, &tag("L"))?,
            s: emit_table(&sc.s, &dir, &tag("S"))?,
            r: emit_table(&sc.r, &dir, &tag("R"))?,
            g: emit_table(std::slice::from_ref(&sc.g), &dir, &tag("G"))?,
        });
    }
    let doc = ScenarioDoc {
        horizon: set.grid.horizon(),
        steps: set.grid.steps(),
        n: set.n,
        k: set.k,
        d: 1,
        x0: set.x0.iter().copied().collect(),
        f: emit_scalar_table(&set.f, &dir, &format!("{stem}_F.csv"))?,
        scenario: sections,
    };
    let text = toml::to_string(&doc).map_err(|e| Error::ScenarioFile(format!("serialize: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn expand_table(
    spec: &TableSpec,
    steps: usize,
    rows: usize,
    cols: usize,
    base: &Path,
    label: &str,
) -> Result<MatrixTable> {
    match spec {
        TableSpec::Scalar(v) => {
            if rows * cols != 1 {
                return Err(Error::ScenarioFile(format!(
                    "{label}: scalar given but table is {rows}x{cols}"
                )));
            }
            Ok(vec![DMatrix::from_element(1, 1, *v); steps])
        }
        TableSpec::Inline(values) => {
            if values.len() != rows * cols {
                return Err(Error::ScenarioFile(format!(
                    "{label}: inline list has {} entries, expected {rows}x{cols} = {}",
                    values.len(),
                    rows * cols
                )));
            }
            Ok(vec![DMatrix::from_row_slice(rows, cols, values); steps])
        }
        TableSpec::Csv(rel) => {
            let rows_data = read_csv(&base.join(rel), label)?;
            if rows_data.len() != steps {
                return Err(Error::ScenarioFile(format!(
                    "{label}: CSV {rel} has {} rows, expected {steps}",
                    rows_data.len()
                )));
            }
            rows_data
                .into_iter()
                .enumerate()
                .map(|(i, row)| {
                    if row.len() != rows * cols {
                        Err(Error::ScenarioFile(format!(
                            "{label} step {i}: CSV row has {} entries, expected {}",
                            row.len(),
                            rows * cols
                        )))
                    } else {
                        Ok(DMatrix::from_row_slice(rows, cols, &row))
                    }
                })
                .collect()
        }
    }
}

fn expand_scalar_table(
    spec: &TableSpec,
    steps: usize,
    base: &Path,
    label: &str,
) -> Result<Vec<f64>> {
    Ok(expand_table(spec, steps, 1, 1, base, label)?
        .into_iter()
        .map(|m| m[(0, 0)])
        .collect())
}

fn emit_table(table: &[DMatrix<f64>], dir: &Path, csv_name: &str) -> Result<TableSpec> {
    let constant = table.windows(2).all(|w| {
        w[0].iter()
            .zip(w[1].iter())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    });
    if constant {
        let m = &table[0];
        if m.len() == 1 {
            return Ok(TableSpec::Scalar(m[(0, 0)]));
        }
        let mut values = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                values.push(m[(r, c)]);
            }
        }
        return Ok(TableSpec::Inline(values));
    }
    let mut out = String::new();
    for m in table {
        let mut row = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                row.push(format!("{}", m[(r, c)]));
            }
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(dir.join(csv_name), out)?;
    Ok(TableSpec::Csv(csv_name.to_string()))
}

fn emit_scalar_table(table: &[f64], dir: &Path, csv_name: &str) -> Result<TableSpec> {
    let mats: Vec<DMatrix<f64>> = table
        .iter()
        .map(|v| DMatrix::from_element(1, 1, *v))
        .collect();
    emit_table(&mats, dir, csv_name)
}

fn read_csv(path: &Path, label: &str) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ScenarioFile(format!("{label}: {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>> = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|e| {
                    Error::ScenarioFile(format!(
                        "{label}: {} line {}: {e}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect();
        rows.push(row?);
    }
    Ok(rows)
}
