//! Command-line front end: parses scenario files, orchestrates
//! validate/solve/verify/sweep/simulate/convergence runs, and emits
//! machine-readable reports.
//!
//! Exit codes: 0 on success, 1 on solver errors or failed verification
//! checks, 2 on scenario parse or validation failures. Errors go to stderr
//! as structured JSON. Every artifact embeds a digest of the scenario file
//! contents plus the effective flags, and repeated runs with the same
//! digest produce byte-identical outputs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use robustlq_core::bsde::BsdeValue;
use robustlq_core::report::{
    CostEntry, RiccatiDiag, SolutionReport, ValidationReport, VerifyReport, SCHEMA_VERSION,
};
use robustlq_core::riccati::DEFAULT_REFINE;
use robustlq_core::robust::{lambda_sweep, solve_robust, RobustOptions, RobustSolution};
use robustlq_core::sde::{
    generate_paths, strong_convergence_order, ControlPath, ConvergenceProblem, OrderFit,
};
use robustlq_core::verify::{run_verification, VerifyOptions};
use robustlq_core::{load_scenario_file, validate_h6, validate_h7, Error, LqScenarioSet};

#[derive(Parser)]
#[command(
    name = "robustlq",
    about = "Two-scenario robust linear-quadratic recursive control",
    version
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Base seed of the Brownian ensemble.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Monte Carlo paths.
    #[arg(long, global = true, default_value_t = 50_000)]
    paths: usize,
    /// Override the scenario file's step count.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Riccati substeps per simulation step.
    #[arg(long, global = true, default_value_t = DEFAULT_REFINE)]
    refine: usize,
    /// Gap tolerance for the worst-case weight (default: auto).
    #[arg(long, global = true)]
    tol_gap: Option<f64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Artifact format.
    #[arg(long, global = true, value_parser = ["json", "csv", "both"], default_value = "json")]
    format: String,
    /// Also evaluate costs by the deterministic moment recursion.
    #[arg(long, global = true, default_value_t = false)]
    cross_check: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Check the standing assumptions of the scenario file.
    Validate {
        /// Coercivity constant delta for the control-weight check.
        #[arg(long, default_value_t = 1e-6)]
        delta: f64,
    },
    /// Solve the robust control problem.
    Solve,
    /// Solve, then verify the first-order optimality theory.
    Verify {
        /// Seeded directions for the derivative checks.
        #[arg(long, default_value_t = 3)]
        directions: usize,
    },
    /// Evaluate the closed-loop costs on a lambda grid.
    Sweep {
        /// Grid spacing in lambda.
        #[arg(long, default_value_t = 0.01)]
        step: f64,
    },
    /// Simulate one scenario under the zero control and dump the paths.
    Simulate {
        /// Scenario index (1-based).
        #[arg(long, default_value_t = 1)]
        theta: usize,
    },
    /// Run the built-in discretization-order benchmarks.
    Convergence,
}

#[derive(Serialize)]
struct ErrorDoc<'a> {
    schema_version: u32,
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

fn emit_error(kind: &str, message: String, code: u8) -> ExitCode {
    let doc = ErrorDoc {
        schema_version: SCHEMA_VERSION,
        error: ErrorBody { kind, message },
    };
    eprintln!("{}", serde_json::to_string(&doc).expect("serializable"));
    ExitCode::from(code)
}

fn error_exit(err: &Error) -> ExitCode {
    let (kind, code) = match err {
        Error::ScenarioFile(_) | Error::Structural(_) | Error::Input(_) => ("parse", 2u8),
        Error::Capacity(_) => ("capacity", 1),
        Error::Simulation { .. } => ("simulation", 1),
        Error::RiccatiSingular { .. } | Error::RiccatiBlowup { .. } => ("riccati", 1),
        Error::Convergence { .. } => ("convergence", 1),
        Error::Unsupported(_) => ("unsupported", 2),
        Error::Io(_) => ("io", 1),
    };
    emit_error(kind, err.to_string(), code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => error_exit(&err),
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let scenario_path = cli
        .common
        .scenario
        .clone()
        .ok_or_else(|| Error::Input("--scenario <path> is required".into()))?;
    let digest = config_digest(&scenario_path, &cli.common, &cli.command)?;
    let loaded = load_scenario_file(&scenario_path, cli.common.steps)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let set = loaded.set;
    std::fs::create_dir_all(&cli.common.out)?;

    match &cli.command {
        Command::Validate { delta } => cmd_validate(&cli.common, &set, *delta, &digest),
        Command::Solve => cmd_solve(&cli.common, &set, &digest),
        Command::Verify { directions } => cmd_verify(&cli.common, &set, *directions, &digest),
        Command::Sweep { step } => cmd_sweep(&cli.common, &set, *step, &digest),
        Command::Simulate { theta } => cmd_simulate(&cli.common, &set, *theta, &digest),
        Command::Convergence => cmd_convergence(&cli.common, &set, &digest),
    }
}

/// SHA-256 over the scenario file bytes and the canonicalized flags.
fn config_digest(path: &Path, common: &Common, command: &Command) -> Result<String, Error> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::ScenarioFile(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let command_tag = match command {
        Command::Validate { delta } => format!("validate delta={delta}"),
        Command::Solve => "solve".to_string(),
        Command::Verify { directions } => format!("verify directions={directions}"),
        Command::Sweep { step } => format!("sweep step={step}"),
        Command::Simulate { theta } => format!("simulate theta={theta}"),
        Command::Convergence => "convergence".to_string(),
    };
    hasher.update(
        format!(
            "{command_tag} seed={} paths={} steps={:?} refine={} tol_gap={:?} format={} cross_check={}",
            common.seed,
            common.paths,
            common.steps,
            common.refine,
            common.tol_gap,
            common.format,
            common.cross_check
        )
        .as_bytes(),
    );
    let out = hasher.finalize();
    Ok(out.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct ValidationDoc {
    schema_version: u32,
    config_digest: String,
    ok: bool,
    h6: ValidationReport,
    h7: ValidationReport,
}

fn cmd_validate(
    common: &Common,
    set: &LqScenarioSet,
    delta: f64,
    digest: &str,
) -> Result<ExitCode, Error> {
    let h6 = validate_h6(set);
    let h7 = validate_h7(set, delta)?;
    let doc = ValidationDoc {
        schema_version: SCHEMA_VERSION,
        config_digest: digest.to_string(),
        ok: h6.ok && h7.ok,
        h6,
        h7,
    };
    let text = serde_json::to_string_pretty(&doc).expect("serializable");
    std::fs::write(common.out.join("validation.json"), &text)?;
    println!("{text}");
    Ok(if doc.ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn solve(common: &Common, set: &LqScenarioSet) -> Result<RobustSolution, Error> {
    let ens = generate_paths(set.grid, 1, common.paths, common.seed)?;
    let opts = RobustOptions {
        tol_gap: common.tol_gap,
        refine: common.refine,
        cross_check: common.cross_check,
        ..RobustOptions::default()
    };
    solve_robust(set, &ens, &opts)
}

fn solution_report(sol: &RobustSolution, digest: &str) -> SolutionReport {
    let costs = sol
        .costs
        .iter()
        .enumerate()
        .map(|(i, v): (usize, &BsdeValue)| CostEntry {
            theta: i + 1,
            y0: v.y0,
            stderr: v.stderr,
        })
        .collect();
    SolutionReport {
        schema_version: SCHEMA_VERSION,
        lambda_star: sol.lambda_star,
        branch: sol.branch.to_string(),
        costs,
        robust_cost: sol.robust_cost,
        gap: sol.gap,
        tol_gap: sol.tol_gap,
        riccati_diag: RiccatiDiag {
            min_eig_p: sol.riccati.min_eig_p_global(),
            min_eig_r: sol.riccati.min_eig_r_global(),
        },
        cross_check: sol.cross_check.map(|c| c.to_vec()),
        config_digest: digest.to_string(),
    }
}

fn write_riccati_csvs(common: &Common, sol: &RobustSolution, digest: &str) -> Result<(), Error> {
    if common.format == "json" {
        return Ok(());
    }
    for (name, table) in [
        ("riccati_p.csv", &sol.riccati.p),
        ("riccati_k.csv", &sol.riccati.gains),
    ] {
        let mut text = format!("# schema_version={SCHEMA_VERSION} config_digest={digest}\n");
        text.push_str("step,row,col,value\n");
        for (step, m) in table.iter().enumerate() {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    text.push_str(&format!("{step},{r},{c},{}\n", m[(r, c)]));
                }
            }
        }
        std::fs::write(common.out.join(name), text)?;
    }
    Ok(())
}

fn cmd_solve(common: &Common, set: &LqScenarioSet, digest: &str) -> Result<ExitCode, Error> {
    let sol = solve(common, set)?;
    let report = solution_report(&sol, digest);
    let text = serde_json::to_string_pretty(&report).expect("serializable");
    std::fs::write(common.out.join("solution.json"), &text)?;
    write_riccati_csvs(common, &sol, digest)?;
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct VerificationDoc {
    schema_version: u32,
    config_digest: String,
    pass: bool,
    checks: Vec<robustlq_core::CheckResult>,
}

fn cmd_verify(
    common: &Common,
    set: &LqScenarioSet,
    directions: usize,
    digest: &str,
) -> Result<ExitCode, Error> {
    let ens = generate_paths(set.grid, 1, common.paths, common.seed)?;
    let opts = RobustOptions {
        tol_gap: common.tol_gap,
        refine: common.refine,
        cross_check: common.cross_check,
        ..RobustOptions::default()
    };
    let sol = solve_robust(set, &ens, &opts)?;
    let report = solution_report(&sol, digest);
    std::fs::write(
        common.out.join("solution.json"),
        serde_json::to_string_pretty(&report).expect("serializable"),
    )?;
    write_riccati_csvs(common, &sol, digest)?;

    let verify_opts = VerifyOptions {
        seed: common.seed,
        directions,
        refine: common.refine,
        ..VerifyOptions::default()
    };
    let verify: VerifyReport = run_verification(set, &sol, &ens, &verify_opts)?;
    let doc = VerificationDoc {
        schema_version: SCHEMA_VERSION,
        config_digest: digest.to_string(),
        pass: verify.pass,
        checks: verify.checks,
    };
    let text = serde_json::to_string_pretty(&doc).expect("serializable");
    std::fs::write(common.out.join("verification.json"), &text)?;
    println!("{text}");
    Ok(if doc.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_sweep(
    common: &Common,
    set: &LqScenarioSet,
    step: f64,
    digest: &str,
) -> Result<ExitCode, Error> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Input(format!(
            "sweep step must lie in (0, 1], got {step}"
        )));
    }
    let ens = generate_paths(set.grid, 1, common.paths, common.seed)?;
    let count = (1.0 / step).round() as usize;
    let mut lambdas: Vec<f64> = (0..count).map(|i| i as f64 * step).collect();
    lambdas.push(1.0);
    let rows = lambda_sweep(set, &ens, &lambdas, common.refine)?;
    let mut text = format!("# schema_version={SCHEMA_VERSION} config_digest={digest}\n");
    text.push_str("lambda,y1,y2,J\n");
    for row in &rows {
        text.push_str(&format!("{},{},{},{}\n", row.lambda, row.y1, row.y2, row.j));
    }
    std::fs::write(common.out.join("sweep.csv"), &text)?;
    #[derive(Serialize)]
    struct SweepDoc<'a> {
        schema_version: u32,
        config_digest: &'a str,
        rows: usize,
        argmin_gap_lambda: f64,
    }
    let best = rows
        .iter()
        .min_by(|a, b| {
            (a.y1 - a.y2)
                .abs()
                .partial_cmp(&(b.y1 - b.y2).abs())
                .expect("finite gaps")
        })
        .expect("nonempty sweep");
    let doc = SweepDoc {
        schema_version: SCHEMA_VERSION,
        config_digest: digest,
        rows: rows.len(),
        argmin_gap_lambda: best.lambda,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&doc).expect("serializable")
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(
    common: &Common,
    set: &LqScenarioSet,
    theta: usize,
    digest: &str,
) -> Result<ExitCode, Error> {
    if theta == 0 || theta > set.count() {
        return Err(Error::Input(format!(
            "theta must lie in 1..={}, got {theta}",
            set.count()
        )));
    }
    let ens = generate_paths(set.grid, 1, common.paths, common.seed)?;
    let ctrl = ControlPath::zero(set.grid.steps(), set.k);
    let paths = robustlq_core::sde::simulate_lq(set, theta - 1, &ctrl, &ens)?;
    let mut text = format!("# schema_version={SCHEMA_VERSION} config_digest={digest}\n");
    text.push_str("path,step,component,value\n");
    for p in 0..paths.paths {
        for i in 0..paths.nodes {
            let state = paths.state(p, i);
            for (c, v) in state.iter().enumerate() {
                text.push_str(&format!("{p},{i},{c},{v}\n"));
            }
        }
    }
    std::fs::write(common.out.join("paths.csv"), &text)?;
    #[derive(Serialize)]
    struct SimulateDoc<'a> {
        schema_version: u32,
        config_digest: &'a str,
        theta: usize,
        paths: usize,
        steps: usize,
    }
    let doc = SimulateDoc {
        schema_version: SCHEMA_VERSION,
        config_digest: digest,
        theta,
        paths: paths.paths,
        steps: set.grid.steps(),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&doc).expect("serializable")
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ConvergenceDoc {
    schema_version: u32,
    config_digest: String,
    euler_strong_geometric: OrderFit,
    euler_ode: OrderFit,
    rk4_riccati: RiccatiOrderDoc,
}

#[derive(Serialize)]
struct RiccatiOrderDoc {
    slope: f64,
    errors: Vec<(usize, f64)>,
}

fn cmd_convergence(common: &Common, _set: &LqScenarioSet, digest: &str) -> Result<ExitCode, Error> {
    let geometric = ConvergenceProblem {
        x0: 1.0,
        horizon: 1.0,
        drift: Box::new(|_, x| x),
        diffusion: Box::new(|_, x| x),
        exact_terminal: Box::new(|w| (0.5 + w).exp()),
    };
    let euler_strong = strong_convergence_order(
        &geometric,
        &[32, 64, 128, 256],
        common.paths.min(20_000),
        common.seed,
    )?;
    let ode = ConvergenceProblem {
        x0: 1.0,
        horizon: 1.0,
        drift: Box::new(|_, x| x),
        diffusion: Box::new(|_, _| 0.0),
        exact_terminal: Box::new(|_| std::f64::consts::E),
    };
    let euler_ode = strong_convergence_order(&ode, &[32, 64, 128], 16, common.seed)?;

    // RK4 order against the closed-form scalar Riccati solution
    let mut errors = Vec::new();
    let mut dts = Vec::new();
    for steps in [50usize, 100, 200] {
        let set = robustlq_core::instances::classical_scalar(steps);
        let blocks = robustlq_core::riccati::assemble_blocks(&set, 1.0)?;
        let sol = robustlq_core::riccati::solve_riccati(&blocks, 1)?;
        let mut max_err: f64 = 0.0;
        for i in 0..=steps {
            let t = sol.grid.node(i);
            max_err = max_err.max((sol.p[i][(0, 0)] - 1.0 / (2.0 - t)).abs());
        }
        errors.push(max_err);
        dts.push(1.0 / steps as f64);
    }
    let slope = robustlq_core::linalg::fit_loglog_slope(&dts, &errors);

    let doc = ConvergenceDoc {
        schema_version: SCHEMA_VERSION,
        config_digest: digest.to_string(),
        euler_strong_geometric: euler_strong,
        euler_ode,
        rk4_riccati: RiccatiOrderDoc {
            slope,
            errors: [50usize, 100, 200].iter().copied().zip(errors).collect(),
        },
    };
    let text = serde_json::to_string_pretty(&doc).expect("serializable");
    std::fs::write(common.out.join("convergence.json"), &text)?;
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}
