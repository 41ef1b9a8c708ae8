//! Command-line front end.
//!
//! Exit codes: 0 success, 1 input error, 2 non-convergence, 3 failed
//! hypothesis check.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ProblemConfig, Registry, WeightSpec};
use crate::grid::{l2_norm, random_trig, DerivCoords, GridFunction};
use crate::output::{Cell, Format, RunResult};
use crate::picard::{picard_solve, SolveReport};
use crate::problem::ProblemInstance;
use crate::sensitivity::{fd_directional, sensitivity_solve, Perturbation};
use crate::variational::{
    check_condition, coercivity_for, coercivity_probe, descent_solve, phi, DescentReport,
};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "VOLTERRA_IDE_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "volterra-ide",
    version,
    about = "Solve, check and differentiate Volterra integro-differential problems"
)]
pub struct Cli {
    /// Seed for every randomized step (probes, random perturbations).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverKind {
    Picard,
    Descent,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the problem and write the trajectory.
    Solve {
        /// Config file, or `builtin:<name>`.
        config: String,
        #[arg(long, value_enum, default_value_t = SolverKind::Picard)]
        solver: SolverKind,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
    },
    /// Evaluate the smallness condition and the coercivity certificate.
    Check {
        config: String,
        #[arg(long, default_value_t = 100)]
        probe_samples: usize,
        #[arg(long, default_value_t = 10.0)]
        probe_radius: f64,
    },
    /// Directional derivative of the solution with respect to the controls.
    Sensitivity {
        config: String,
        /// `zero`, `constant:c`, `sine:amp,freq[,phase]` or `random:terms`.
        #[arg(long, default_value = "zero")]
        du: String,
        #[arg(long, default_value = "zero")]
        dv: String,
        /// Also compare with a one-sided difference quotient at this step.
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
    },
    /// Re-solve for each value of one scalar parameter.
    Sweep {
        config: String,
        /// `kernel.<i>`, `rhs.<i>`, `u.<i>`, `v.<i>`, `grid_n`, `tol`, `k` or `max_iter`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
    },
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let registry = Registry::with_builtins();
    let result = match &cli.command {
        Command::Solve {
            config,
            solver,
            out,
            format,
        } => cmd_solve(&registry, config, *solver, out.as_deref(), (*format).into()),
        Command::Check {
            config,
            probe_samples,
            probe_radius,
        } => cmd_check(&registry, config, *probe_samples, *probe_radius, cli.seed),
        Command::Sensitivity {
            config,
            du,
            dv,
            eps,
            out,
            format,
        } => cmd_sensitivity(
            &registry,
            config,
            du,
            dv,
            *eps,
            cli.seed,
            out.as_deref(),
            (*format).into(),
        ),
        Command::Sweep {
            config,
            param,
            values,
            out,
            format,
        } => cmd_sweep(
            &registry,
            config,
            param,
            values,
            out.as_deref(),
            (*format).into(),
        ),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.message);
            EXIT_INPUT
        }
    }
}

/// An input error: machine-readable code plus message.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<crate::config::ConfigError> for CliError {
    fn from(e: crate::config::ConfigError) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::new("solver", e.to_string())
}

fn load(registry: &Registry, path: &str) -> Result<(ProblemConfig, ProblemInstance), CliError> {
    Ok(registry.load(path)?)
}

fn output_path(out: Option<&Path>, name: &str, command: &str, format: Format) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| {
        let dir = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from);
        dir.join(format!("{name}_{command}.{}", format.extension()))
    })
}

fn write(result: &RunResult, path: &Path, format: Format) -> Result<(), CliError> {
    let written = result
        .write(path, format)
        .map_err(|e| CliError::new("io", format!("cannot write {}: {e}", path.display())))?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn indexed(prefix: &str, dim: usize) -> impl Iterator<Item = String> + '_ {
    (0..dim).map(move |c| format!("{prefix}_{c}"))
}

fn print_meta(result: &RunResult) {
    for (k, v) in &result.meta {
        println!("{k} = {}", v.to_csv_field());
    }
}

fn picard_meta(result: &mut RunResult, prefix: &str, r: &SolveReport) {
    result.meta(&format!("{prefix}_converged"), r.converged);
    result.meta(&format!("{prefix}_iterations"), r.iterations);
    result.meta(&format!("{prefix}_k"), r.k_used);
    result.meta(&format!("{prefix}_contraction_bound"), r.contraction_bound);
    result.meta(&format!("{prefix}_max_ratio"), r.max_ratio());
    result.meta(&format!("{prefix}_last_increment"), r.last_increment());
    result.meta(&format!("{prefix}_final_residual_l2"), r.final_residual_l2);
}

fn descent_meta(result: &mut RunResult, r: &DescentReport) {
    result.meta("descent_converged", r.converged);
    result.meta("descent_iterations", r.iterations);
    result.meta("descent_line_search_failed", r.line_search_failed);
    result.meta("descent_final_phi", r.phi_values.last().copied());
    result.meta("descent_final_grad_norm", r.grad_norms.last().copied());
}

fn cmd_solve(
    registry: &Registry,
    config: &str,
    solver: SolverKind,
    out: Option<&Path>,
    format: Format,
) -> Result<i32, CliError> {
    let (cfg, p) = load(registry, config)?;
    let scfg = cfg.solver_config()?;
    let (grid, dim) = (p.grid(), p.dim_n());

    let picard = match solver {
        SolverKind::Picard | SolverKind::Both => Some(picard_solve(&p, &scfg).map_err(internal)?),
        SolverKind::Descent => None,
    };
    let descent = match solver {
        SolverKind::Descent | SolverKind::Both => Some(descent_solve(&p, &scfg).map_err(internal)?),
        SolverKind::Picard => None,
    };
    // The primary trajectory: Picard when available.
    let primary: &DerivCoords = picard
        .as_ref()
        .map(|(x, _)| x)
        .or(descent.as_ref().map(|(x, _)| x))
        .expect("at least one solver ran");
    let exact = cfg.exact.map(|e| e.sample(grid, dim));

    let mut columns = vec!["t".to_string()];
    columns.extend(indexed("x", dim));
    columns.extend(indexed("l", dim));
    if picard.is_some() && descent.is_some() {
        columns.extend(indexed("x_descent", dim));
    }
    if exact.is_some() {
        columns.extend(indexed("x_exact", dim));
        columns.push("abs_error".into());
    }
    let mut result = RunResult::new(columns);
    result.meta("name", cfg.name.as_str());
    result.meta("grid_n", cfg.grid_n);
    result.meta("dim", dim);
    result.meta("tol", scfg.tol);
    result.meta("phi", phi(&p, primary).map_err(internal)?);
    let mut converged = true;
    if let Some((_, r)) = &picard {
        picard_meta(&mut result, "picard", r);
        converged &= r.converged;
    }
    if let Some((_, r)) = &descent {
        descent_meta(&mut result, r);
        converged &= r.converged;
    }
    if let (Some((xp, _)), Some((xd, _))) = (&picard, &descent) {
        result.meta("max_discrepancy", xp.x().max_distance(xd.x()));
    }
    if let Some(e) = &exact {
        result.meta("max_error", primary.x().max_distance(e));
    }

    for i in 0..grid.n_nodes() {
        let mut row: Vec<Cell> = vec![grid.node(i).into()];
        row.extend(primary.x().node(i).iter().map(|&v| Cell::from(v)));
        row.extend(primary.l().node(i).iter().map(|&v| Cell::from(v)));
        if let (Some(_), Some((xd, _))) = (&picard, &descent) {
            row.extend(xd.x().node(i).iter().map(|&v| Cell::from(v)));
        }
        if let Some(e) = &exact {
            row.extend(e.node(i).iter().map(|&v| Cell::from(v)));
            let err = primary
                .x()
                .node(i)
                .iter()
                .zip(e.node(i))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            row.push(err.into());
        }
        result.push_row(row);
    }

    print_meta(&result);
    write(
        &result,
        &output_path(out, &cfg.name, "solve", format),
        format,
    )?;
    Ok(if converged {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    })
}

fn cmd_check(
    registry: &Registry,
    config: &str,
    samples: usize,
    radius: f64,
    seed: u64,
) -> Result<i32, CliError> {
    let (_, p) = load(registry, config)?;
    let check = check_condition(&p.growth().norms());
    let bound = coercivity_for(&p);
    println!("lhs = {}", check.lhs);
    println!("threshold = {}", check.threshold);
    println!("margin = {}", check.margin);
    println!("condition = {}", if check.passed { "pass" } else { "fail" });
    println!("c2 = {}", bound.c2);
    println!("c1 = {}", bound.c1);
    println!("c0 = {}", bound.c0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = coercivity_probe(&p, samples, radius, &mut rng)
        .map_err(|e| CliError::new("invalid_value", e.to_string()))?;
    println!("probe_samples = {}", probe.samples);
    println!("probe_violations = {}", probe.violations);
    println!("probe_min_slack = {}", probe.min_slack);
    // Below the threshold the bound is vacuous for large norms; the probe is
    // informational only.
    let ok = check.passed && probe.passed();
    Ok(if ok { EXIT_OK } else { EXIT_CHECK_FAILED })
}

/// Parses a perturbation component: `zero`, `constant:c`,
/// `sine:amp,freq[,phase]` or `random:terms`.
pub fn parse_direction(
    spec: &str,
    p: &ProblemInstance,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GridFunction, CliError> {
    let bad = |msg: String| CliError::new("invalid_perturbation", msg);
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let nums: Vec<f64> = if rest.is_empty() {
        vec![]
    } else {
        rest.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("`{s}` is not a number")))
            })
            .collect::<Result<_, _>>()?
    };
    if nums.iter().any(|v| !v.is_finite()) {
        return Err(bad(format!("`{spec}` has non-finite values")));
    }
    let grid = p.grid();
    match (kind, nums.as_slice()) {
        ("zero", []) => Ok(GridFunction::zeros(grid, dim)),
        ("constant", [c]) => Ok(GridFunction::constant(grid, &vec![*c; dim])),
        ("sine", [amp, freq]) | ("sine", [amp, freq, _]) => {
            let phase = nums.get(2).copied().unwrap_or(0.0);
            Ok(GridFunction::from_fn(grid, dim, |t, o| {
                o.fill(amp * (freq * t + phase).sin())
            }))
        }
        ("random", [terms]) if *terms >= 1.0 && terms.fract() == 0.0 => {
            Ok(random_trig(grid, dim, *terms as usize, rng))
        }
        _ => Err(bad(format!("cannot parse perturbation `{spec}`"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_sensitivity(
    registry: &Registry,
    config: &str,
    du: &str,
    dv: &str,
    eps: Option<f64>,
    seed: u64,
    out: Option<&Path>,
    format: Format,
) -> Result<i32, CliError> {
    let (cfg, p) = load(registry, config)?;
    let scfg = cfg.solver_config()?;
    if let Some(e) = eps {
        if !(e > 0.0 && e.is_finite()) {
            return Err(CliError::new(
                "invalid_value",
                format!("eps must be positive, got {e}"),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pert = Perturbation::new(
        parse_direction(du, &p, p.dim_m(), &mut rng)?,
        parse_direction(dv, &p, p.dim_r(), &mut rng)?,
    )
    .map_err(|e| CliError::new("invalid_perturbation", e.to_string()))?;

    let (x, report) = picard_solve(&p, &scfg).map_err(internal)?;
    if !report.converged {
        eprintln!(
            "forward solve did not converge in {} iterations",
            report.iterations
        );
        return Ok(EXIT_NOT_CONVERGED);
    }
    let sens = sensitivity_solve(&p, &x, &pert, &scfg).map_err(internal)?;
    let fd = match eps {
        Some(e) => match fd_directional(&p, &pert, e, &scfg) {
            Ok(fd) => Some(fd),
            Err(err) => {
                eprintln!("difference quotient failed: {err}");
                return Ok(EXIT_NOT_CONVERGED);
            }
        },
        None => None,
    };

    let (grid, dim) = (p.grid(), p.dim_n());
    let mut columns = vec!["t".to_string()];
    columns.extend(indexed("z", dim));
    columns.extend(indexed("z_prime", dim));
    if fd.is_some() {
        columns.extend(indexed("z_fd", dim));
        columns.push("fd_error".into());
    }
    let mut result = RunResult::new(columns);
    result.meta("name", cfg.name.as_str());
    result.meta("grid_n", cfg.grid_n);
    picard_meta(&mut result, "forward", &report);
    picard_meta(&mut result, "sensitivity", &sens.report);
    let mut lin = crate::problem::apply_fx(&p, &x, &sens.z).map_err(internal)?;
    lin.axpy(
        1.0,
        &crate::problem::apply_fuv(&p, &x, &pert.du, &pert.dv).map_err(internal)?,
    );
    result.meta("linearized_residual_l2", l2_norm(&lin));
    if let (Some(e), Some(fd)) = (eps, &fd) {
        result.meta("eps", e);
        result.meta("max_fd_error", fd.x().max_distance(sens.z.x()));
    }
    for i in 0..grid.n_nodes() {
        let mut row: Vec<Cell> = vec![grid.node(i).into()];
        row.extend(sens.z.x().node(i).iter().map(|&v| Cell::from(v)));
        row.extend(sens.z.l().node(i).iter().map(|&v| Cell::from(v)));
        if let Some(fd) = &fd {
            row.extend(fd.x().node(i).iter().map(|&v| Cell::from(v)));
            let err = fd
                .x()
                .node(i)
                .iter()
                .zip(sens.z.x().node(i))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            row.push(err.into());
        }
        result.push_row(row);
    }
    print_meta(&result);
    write(
        &result,
        &output_path(out, &cfg.name, "sensitivity", format),
        format,
    )?;
    Ok(if sens.report.converged {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    })
}

/// Which scalar of a config a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Kernel(usize),
    Rhs(usize),
    U(usize),
    V(usize),
    GridN,
    Tol,
    K,
    MaxIter,
}

impl SweepParam {
    pub fn parse(name: &str, cfg: &ProblemConfig) -> Result<Self, CliError> {
        let bad = |msg: String| CliError::new("invalid_param", msg);
        let indexed = |rest: &str, len: usize| -> Result<usize, CliError> {
            let i: usize = rest
                .parse()
                .map_err(|_| bad(format!("`{name}`: `{rest}` is not an index")))?;
            if i >= len {
                return Err(bad(format!(
                    "`{name}`: index {i} out of range (have {len} parameters)"
                )));
            }
            Ok(i)
        };
        match name.split_once('.') {
            Some(("kernel", i)) => Ok(SweepParam::Kernel(indexed(i, cfg.kernel.params.len())?)),
            Some(("rhs", i)) => Ok(SweepParam::Rhs(indexed(i, cfg.rhs.params.len())?)),
            Some(("u", i)) => Ok(SweepParam::U(indexed(i, cfg.controls.u.params.len())?)),
            Some(("v", i)) => Ok(SweepParam::V(indexed(i, cfg.controls.v.params.len())?)),
            None if name == "grid_n" => Ok(SweepParam::GridN),
            None if name == "tol" => Ok(SweepParam::Tol),
            None if name == "k" => Ok(SweepParam::K),
            None if name == "max_iter" => Ok(SweepParam::MaxIter),
            _ => Err(bad(format!("unknown sweep parameter `{name}`"))),
        }
    }

    /// Copy of `cfg` with the parameter set to `value`.
    pub fn apply(&self, cfg: &ProblemConfig, value: f64) -> Result<ProblemConfig, String> {
        let mut c = cfg.clone();
        let count = |v: f64, what: &str| -> Result<usize, String> {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(format!("{what} must be a nonnegative integer, got {v}"))
            }
        };
        match *self {
            SweepParam::Kernel(i) => c.kernel.params[i] = value,
            SweepParam::Rhs(i) => c.rhs.params[i] = value,
            SweepParam::U(i) => c.controls.u.params[i] = value,
            SweepParam::V(i) => c.controls.v.params[i] = value,
            SweepParam::GridN => c.grid_n = count(value, "grid_n")?,
            SweepParam::Tol => c.solver.tol = value,
            SweepParam::K => c.solver.k = WeightSpec::Value(value),
            SweepParam::MaxIter => c.solver.max_iter = count(value, "max_iter")?,
        }
        Ok(c)
    }
}

pub const SWEEP_COLUMNS: [&str; 12] = [
    "value",
    "status",
    "converged",
    "iterations",
    "phi",
    "max_ratio",
    "contraction_bound",
    "margin",
    "c2",
    "final_residual_l2",
    "max_error",
    "message",
];

fn sweep_row(
    registry: &Registry,
    base: &ProblemConfig,
    param: SweepParam,
    value: f64,
) -> Vec<Cell> {
    let failed = |status: &str, msg: String| {
        let mut row = vec![Cell::Num(value), status.into()];
        row.extend(std::iter::repeat_n(Cell::Empty, SWEEP_COLUMNS.len() - 3));
        row.push(msg.into());
        row
    };
    let cfg = match param.apply(base, value) {
        Ok(c) => c,
        Err(msg) => return failed("error", msg),
    };
    let p = match registry.build(&cfg) {
        Ok(p) => p,
        Err(e) => return failed("error", e.to_string()),
    };
    let scfg = match cfg.solver_config() {
        Ok(s) => s,
        Err(e) => return failed("error", e.to_string()),
    };
    let (x, report) = match picard_solve(&p, &scfg) {
        Ok(r) => r,
        Err(e) => return failed("error", e.to_string()),
    };
    let phi_value = phi(&p, &x).ok();
    let check = check_condition(&p.growth().norms());
    let err = cfg
        .exact
        .map(|e| x.x().max_distance(&e.sample(p.grid(), p.dim_n())));
    vec![
        Cell::Num(value),
        (if report.converged {
            "ok"
        } else {
            "not_converged"
        })
        .into(),
        report.converged.into(),
        report.iterations.into(),
        phi_value.into(),
        report.max_ratio().into(),
        report.contraction_bound.into(),
        check.margin.into(),
        coercivity_for(&p).c2.into(),
        report.final_residual_l2.into(),
        err.into(),
        Cell::Empty,
    ]
}

fn cmd_sweep(
    registry: &Registry,
    config: &str,
    param: &str,
    values: &str,
    out: Option<&Path>,
    format: Format,
) -> Result<i32, CliError> {
    let (cfg, _) = load(registry, config)?;
    let param = SweepParam::parse(param, &cfg)?;
    let values: Vec<f64> = values
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| CliError::new("invalid_value", format!("`{s}` is not a number")))
        })
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(CliError::new("empty_sweep", "no sweep values given"));
    }
    let rows: Vec<Vec<Cell>> = values
        .par_iter()
        .map(|&v| sweep_row(registry, &cfg, param, v))
        .collect();
    let mut result = RunResult::new(SWEEP_COLUMNS.iter().map(|s| s.to_string()).collect());
    result.meta("name", cfg.name.as_str());
    result.meta("values", values.len());
    let all_ok = rows.iter().all(|r| r[1] == Cell::from("ok"));
    for r in rows {
        result.push_row(r);
    }
    result.meta("all_converged", all_ok);
    print_meta(&result);
    write(
        &result,
        &output_path(out, &cfg.name, "sweep", format),
        format,
    )?;
    Ok(if all_ok { EXIT_OK } else { EXIT_NOT_CONVERGED })
}
