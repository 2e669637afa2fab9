//! Command-line driver for the estimate-verification and reconstruction
//! pipelines.
//!
//! Four subcommands share one JSON configuration file:
//!
//! * `verify-carleman` — integrated-estimate sweep over the weight strength
//!   on a compactly supported bump field; writes `carleman.csv`.
//! * `forward` — solves the forward problem for the configured scenario and
//!   reports synthetic-data quality; writes `forward.csv`.
//! * `invert` — reconstructs the source factor from the configured data;
//!   writes `reconstruction.csv`.
//! * `sweep` — measures reconstruction error against perturbation magnitude;
//!   writes `sweep.csv` and a JSON summary with the fitted slope.
//!
//! Exit codes: 0 on success, 2 when the configuration cannot be parsed, 3
//! when it parses but fails validation (the error JSON names the offending
//! key), 4 when an iterative solver fails, 1 for I/O failures. Every failure
//! prints a single machine-readable JSON object to stderr. The
//! `CARLEMAN_THREADS` environment variable caps worker-thread parallelism;
//! outputs are byte-identical for identical effective configurations
//! regardless of the cap.

mod config;
mod output;

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use carlisp::corpus;
use carlisp::geometry::{self, DataBoundary};
use carlisp::isp::{self, AlphaRule};
use carlisp::{Coefficients, Data, Domain, Field, Grid, Real, SpatialField, Weight};

use config::{AlphaRuleSpec, CommandKind, DomainSpec, ExperimentConfig, IspSpec};
use output::{fmt_float, JsonObject, OutputSink};

// ---------------------------------------------------------------------------
// Error type and exit codes.
// ---------------------------------------------------------------------------

/// Driver-level failure, carrying the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// The configuration file is missing or not valid JSON for the schema.
    ConfigParse(String),
    /// The configuration parsed but a value is out of range or inconsistent.
    Validation { key: Option<String>, message: String },
    /// An iterative linear solver stagnated or diverged.
    Solver(String),
    /// Output files could not be written.
    Io(String),
    /// The command line itself was malformed.
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigParse(_) | CliError::Usage(_) => 2,
            CliError::Validation { .. } => 3,
            CliError::Solver(_) => 4,
            CliError::Io(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::ConfigParse(_) => "config_parse",
            CliError::Validation { .. } => "validation",
            CliError::Solver(_) => "solver",
            CliError::Io(_) => "io",
            CliError::Usage(_) => "usage",
        }
    }

    fn key(&self) -> Option<&str> {
        match self {
            CliError::Validation { key, .. } => key.as_deref(),
            _ => None,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::ConfigParse(m)
            | CliError::Solver(m)
            | CliError::Io(m)
            | CliError::Usage(m) => m,
            CliError::Validation { message, .. } => message,
        }
    }
}

/// Maps library errors onto exit codes: solver failures are their own class;
/// everything else reports a domain/data precondition that better input would
/// fix, so it lands in the validation class.
fn core_err(e: carlisp::Error) -> CliError {
    match e {
        carlisp::Error::SolverFailure { .. } => CliError::Solver(e.to_string()),
        other => CliError::Validation { key: None, message: other.to_string() },
    }
}

fn emit_error(e: &CliError) {
    let json = serde_json::json!({
        "error": {
            "kind": e.kind(),
            "exit_code": e.exit_code(),
            "key": e.key(),
            "message": e.message(),
        }
    });
    eprintln!("{json}");
}

// ---------------------------------------------------------------------------
// Command line.
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "carlisp",
    version,
    about = "Weighted-estimate verification and inverse source reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Path to the experiment configuration JSON file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<std::path::PathBuf>,
    /// Output directory (overrides the configuration's `output`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<String>,
    /// RNG seed (overrides the configuration's `isp.seed`).
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Suppress progress output on stdout.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Sweep the weight strength and verify the integrated estimate.
    VerifyCarleman,
    /// Solve the forward problem for the configured scenario.
    Forward,
    /// Reconstruct the source factor from the configured data.
    Invert,
    /// Measure reconstruction error against perturbation magnitude.
    Sweep,
}

impl Command {
    fn kind(self) -> CommandKind {
        match self {
            Command::VerifyCarleman => CommandKind::VerifyCarleman,
            Command::Forward => CommandKind::Forward,
            Command::Invert => CommandKind::Invert,
            Command::Sweep => CommandKind::Sweep,
        }
    }
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string());
            emit_error(&err);
            return err.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            emit_error(&e);
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    init_thread_cap()?;

    let path = cli.config.as_ref().ok_or_else(|| {
        CliError::Usage("missing required option --config <PATH>".to_string())
    })?;
    let bytes = fs::read(path).map_err(|e| {
        CliError::ConfigParse(format!("cannot read configuration {}: {e}", path.display()))
    })?;
    let mut cfg = ExperimentConfig::from_json(&bytes)?;
    cfg.apply_overrides(cli.seed, cli.out.as_deref());
    cfg.validate(cli.command.kind())?;

    let hash = cfg.hash();
    let sink = OutputSink::create(Path::new(&cfg.output), &hash, cli.quiet)?;

    match cli.command {
        Command::VerifyCarleman => cmd_verify_carleman(&cfg, &sink),
        Command::Forward => cmd_forward(&cfg, &sink),
        Command::Invert => cmd_invert(&cfg, &sink),
        Command::Sweep => cmd_sweep(&cfg, &sink),
    }
}

/// Applies the `CARLEMAN_THREADS` cap to the global worker pool. The
/// orchestration itself is single-threaded, so the cap can only shrink the
/// pool; it never changes results.
fn init_thread_cap() -> Result<(), CliError> {
    let raw = match std::env::var("CARLEMAN_THREADS") {
        Ok(raw) => raw,
        Err(_) => return Ok(()),
    };
    let n: usize = raw.trim().parse().map_err(|_| CliError::Validation {
        key: Some("CARLEMAN_THREADS".to_string()),
        message: format!("expected a positive integer thread cap, got `{raw}`"),
    })?;
    if n == 0 {
        return Err(CliError::Validation {
            key: Some("CARLEMAN_THREADS".to_string()),
            message: "thread cap must be at least 1".to_string(),
        });
    }
    // A second build_global call (e.g. in tests) is harmless: the cap then
    // stays at its first value.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared scenario assembly.
// ---------------------------------------------------------------------------

fn build_domain(spec: &DomainSpec) -> Result<Domain, CliError> {
    match *spec {
        DomainSpec::Interval { a, b } => Domain::interval(a, b).map_err(core_err),
        DomainSpec::Prism { dim } => Domain::prism(dim).map_err(core_err),
        DomainSpec::Paraboloid { dim } => Domain::paraboloid(dim).map_err(core_err),
    }
}

fn build_coefficients(grid: &Arc<Grid>, preset: &str) -> Coefficients {
    match preset {
        "variable_a" => Coefficients::variable_a(grid.clone()),
        "full_lower_order" => Coefficients::full_lower_order(grid.clone()),
        _ => Coefficients::laplacian(grid.clone()),
    }
}

fn parse_boundary(mode: &str) -> DataBoundary {
    if mode == "gamma_only" {
        DataBoundary::GammaOnly
    } else {
        DataBoundary::FullLateral
    }
}

/// Everything the data-driven subcommands need, assembled once.
struct Setup {
    grid: Arc<Grid>,
    co: Coefficients,
    b_true: SpatialField,
    r: Field,
    f0: SpatialField,
    /// Space-time extension of the lateral Dirichlet data.
    g_ext: Field,
    /// Exact solution when the scenario has one in closed form.
    u_exact: Option<Field>,
    data: Data,
    boundary: DataBoundary,
}

fn assemble_setup(cfg: &ExperimentConfig) -> Result<Setup, CliError> {
    let isp_cfg: &IspSpec = cfg.isp.as_ref().expect("validated");
    let boundary = parse_boundary(&isp_cfg.boundary);
    let domain = build_domain(&cfg.domain)?;

    if isp_cfg.r_preset == "manufactured" {
        let sc = corpus::manufactured_interval(
            domain,
            cfg.grid.resolution,
            cfg.grid.nt,
            cfg.grid.t_final,
            boundary,
        )
        .map_err(core_err)?;
        // Rebuild the bundle with the configured positivity floor so the
        // floor the user certifies is the floor that gets checked.
        let Data { p, q, f, big_f, r, .. } = sc.data;
        let data =
            Data::new(p, q, f, big_f, r, isp_cfg.sigma, boundary).map_err(core_err)?;
        Ok(Setup {
            grid: sc.grid,
            co: sc.co,
            b_true: sc.b_true,
            r: data.r.clone(),
            f0: data.f.clone(),
            g_ext: sc.u_star.clone(),
            u_exact: Some(sc.u_star),
            data,
            boundary,
        })
    } else {
        let grid = Arc::new(
            Grid::build(domain, cfg.grid.resolution, cfg.grid.t_final, cfg.grid.nt)
                .map_err(core_err)?,
        );
        let co = build_coefficients(&grid, &cfg.coefficients.preset);
        let b_true = match isp_cfg.b_preset.as_str() {
            "random" => corpus::random_b(&grid, isp_cfg.seed, 2.0, 0.5),
            _ => SpatialField::from_fn(grid.clone(), |_| 2.5),
        };
        let r = Field::from_fn(grid.clone(), |_, t| (-t).exp());
        let f0 = SpatialField::from_fn(grid.clone(), |x| 2.0 + x[0]);
        let g_ext = Field::from_fn(grid.clone(), |x, _| 2.0 + x[0]);
        let sol = co
            .forward_solve(
                &b_true,
                &r,
                &f0,
                sample_field(&g_ext),
                Some(isp_cfg.sigma),
                boundary,
            )
            .map_err(core_err)?;
        let data = Data::new(sol.p, sol.q, f0.clone(), sol.terminal, r.clone(), isp_cfg.sigma, boundary)
            .map_err(core_err)?;
        Ok(Setup { grid, co, b_true, r, f0, g_ext, u_exact: None, data, boundary })
    }
}

/// Turns a space-time grid field into a `(x, t) -> value` closure by exact
/// node lookup (the solver always evaluates boundary data at grid nodes and
/// level times, so bit-exact coordinate keys are safe).
fn sample_field(field: &Field) -> impl Fn(&[Real], Real) -> Real + '_ {
    let grid = field.grid().clone();
    let mut lookup: HashMap<Vec<u64>, usize> = HashMap::with_capacity(grid.n_nodes());
    for node in 0..grid.n_nodes() {
        let key: Vec<u64> = grid.node_coords(node).iter().map(|c| c.to_bits()).collect();
        lookup.insert(key, node);
    }
    move |x: &[Real], t: Real| {
        let key: Vec<u64> = x.iter().map(|c| c.to_bits()).collect();
        let node = *lookup.get(&key).expect("boundary sample requested off the grid");
        let m = (t / grid.dt()).round() as usize;
        field.at(node, m.min(grid.nt() - 1))
    }
}

fn alpha_rule_of(isp_cfg: &IspSpec) -> AlphaRule<Real> {
    match (&isp_cfg.alpha, &isp_cfg.alpha_rule) {
        (Some(a), _) => AlphaRule::Fixed(*a),
        (None, Some(AlphaRuleSpec::Discrepancy { noise })) => {
            AlphaRule::Discrepancy { noise: *noise }
        }
        (None, None) => unreachable!("validated"),
    }
}

/// CSV header fragment `x1,...,xd` followed by per-node coordinate cells.
fn coord_header(dim: usize) -> String {
    (1..=dim).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",")
}

fn coord_cells(grid: &Grid, node: usize) -> Vec<String> {
    grid.node_coords(node).iter().map(|&c| fmt_float(c)).collect()
}

// ---------------------------------------------------------------------------
// Subcommands.
// ---------------------------------------------------------------------------

fn cmd_verify_carleman(cfg: &ExperimentConfig, sink: &OutputSink) -> Result<(), CliError> {
    let domain = build_domain(&cfg.domain)?;
    let grid = Arc::new(
        Grid::build(domain, cfg.grid.resolution, cfg.grid.t_final, cfg.grid.nt)
            .map_err(core_err)?,
    );
    let co = build_coefficients(&grid, &cfg.coefficients.preset);
    let u = corpus::bump_field(&grid);

    let lambdas: Vec<Real> = match (&cfg.carleman.lambda_sweep, cfg.carleman.lambda) {
        (Some(sweep), _) => sweep.clone(),
        (None, Some(single)) => vec![single],
        (None, None) => unreachable!("validated"),
    };
    let reports = carlisp::carleman::integrated_estimate(&u, &co, cfg.carleman.mu, &lambdas)
        .map_err(core_err)?;

    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                fmt_float(r.lambda),
                fmt_float(r.lhs_integral),
                fmt_float(r.energy_bracket),
                fmt_float(r.margin_ratio),
                fmt_float(r.cancellation_defect),
            ]
        })
        .collect();
    sink.write_csv(
        "carleman.csv",
        "lambda,lhs_integral,energy_bracket,margin_ratio,cancellation_defect",
        &rows,
    )?;

    let first_margin = reports.first().map(|r| r.margin_ratio).unwrap_or(0.0);
    let min_margin = reports.iter().map(|r| r.margin_ratio).fold(f64::INFINITY, f64::min);
    let max_cancel = reports
        .iter()
        .map(|r| r.cancellation_defect)
        .fold(0.0_f64, f64::max);
    let mut body = JsonObject::new();
    body.string("command", "verify-carleman")
        .float("mu", cfg.carleman.mu)
        .float_array("lambdas", &lambdas)
        .int("rows", reports.len() as i64)
        .float("first_margin_ratio", first_margin)
        .float("min_margin_ratio", min_margin)
        .float(
            "margin_retention",
            if first_margin > 0.0 { min_margin / first_margin } else { 0.0 },
        )
        .float("max_cancellation_defect", max_cancel);
    sink.write_json("carleman.json", &body)?;
    Ok(())
}

fn cmd_forward(cfg: &ExperimentConfig, sink: &OutputSink) -> Result<(), CliError> {
    let setup = assemble_setup(cfg)?;
    let isp_cfg = cfg.isp.as_ref().expect("validated");
    let sol = setup
        .co
        .forward_solve(
            &setup.b_true,
            &setup.r,
            &setup.f0,
            sample_field(&setup.g_ext),
            Some(isp_cfg.sigma),
            setup.boundary,
        )
        .map_err(core_err)?;

    let grid = &setup.grid;
    let mut rows = Vec::new();
    for &node in grid.active_nodes() {
        let mut row = vec![node.to_string()];
        row.extend(coord_cells(grid, node));
        row.push(fmt_float(sol.terminal.at(node)));
        rows.push(row);
    }
    let header = format!("node,{},u_terminal", coord_header(grid.dim()));
    sink.write_csv("forward.csv", &header, &rows)?;

    let mut min_u = f64::INFINITY;
    let mut max_u = f64::NEG_INFINITY;
    for m in 0..grid.nt() {
        for &node in grid.active_nodes() {
            let v = sol.u.at(node, m);
            min_u = min_u.min(v);
            max_u = max_u.max(v);
        }
    }
    let linf_error = setup.u_exact.as_ref().map(|exact| {
        let mut err: f64 = 0.0;
        for m in 0..grid.nt() {
            for &node in grid.active_nodes() {
                err = err.max((sol.u.at(node, m) - exact.at(node, m)).abs());
            }
        }
        err
    });

    let mut body = JsonObject::new();
    body.string("command", "forward")
        .int("active_nodes", grid.active_nodes().len() as i64)
        .int("time_levels", grid.nt() as i64)
        .float("min_u", min_u)
        .float("max_u", max_u)
        .float("sigma", isp_cfg.sigma)
        .float_or_null("linf_error_vs_exact", linf_error);
    sink.write_json("forward.json", &body)?;
    Ok(())
}

fn cmd_invert(cfg: &ExperimentConfig, sink: &OutputSink) -> Result<(), CliError> {
    let setup = assemble_setup(cfg)?;
    let isp_cfg = cfg.isp.as_ref().expect("validated");
    let lambda = cfg.carleman.lambda.expect("validated");
    let weight = Weight::new(lambda, cfg.carleman.mu).map_err(core_err)?;
    let rule = alpha_rule_of(isp_cfg);
    let rec = isp::reconstruct(&setup.co, &setup.data, &weight, &rule).map_err(core_err)?;

    let grid = &setup.grid;
    let mut rows = Vec::new();
    for &node in grid.active_nodes() {
        let mut row = vec![node.to_string()];
        row.extend(coord_cells(grid, node));
        row.push(fmt_float(setup.b_true.at(node)));
        row.push(fmt_float(rec.b_hat.at(node)));
        rows.push(row);
    }
    let header = format!("node,{},b_true,b_hat", coord_header(grid.dim()));
    sink.write_csv("reconstruction.csv", &header, &rows)?;

    let diff = rec.b_hat.zip(&setup.b_true, |a, b| a - b);
    let truth_norm = setup.b_true.l2();
    let rel_error =
        if truth_norm > 0.0 { Some(diff.l2() / truth_norm) } else { None };

    let mut body = JsonObject::new();
    body.string("command", "invert")
        .float_or_null("relative_l2_error", rel_error)
        .float("residual_norm", rec.residual_norm)
        .float("regularization", rec.regularization)
        .float("lambda", rec.lambda_used)
        .float("mu", cfg.carleman.mu)
        .int("iterations", rec.iterations as i64)
        .string_or_null("warning", rec.warning.as_deref());
    sink.write_json("invert.json", &body)?;
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, sink: &OutputSink) -> Result<(), CliError> {
    let setup = assemble_setup(cfg)?;
    let isp_cfg = cfg.isp.as_ref().expect("validated");
    let lambda = cfg.carleman.lambda.expect("validated");
    let weight = Weight::new(lambda, cfg.carleman.mu).map_err(core_err)?;
    let rule = alpha_rule_of(isp_cfg);
    let seeds: Vec<u64> =
        isp_cfg.seeds.clone().unwrap_or_else(|| vec![isp_cfg.seed]);

    // Optional interior subdomain: keep nodes whose level-function value is
    // at least `epsilon` below its supremum over the domain.
    let grid = setup.grid.clone();
    let level_cut = isp_cfg.epsilon.map(|eps| grid.domain().level_sup() - eps);
    let mask_fn = |node: usize| -> bool {
        match level_cut {
            Some(cut) => geometry::level(&grid.node_coords(node)) <= cut,
            None => true,
        }
    };
    let mask: Option<&dyn Fn(usize) -> bool> =
        if level_cut.is_some() { Some(&mask_fn) } else { None };

    // Reference the sweep against the clean-data reconstruction, not the
    // true source: the fixed discretization bias is independent of the
    // perturbation size and would otherwise dominate small deltas, hiding
    // the stability exponent the sweep is meant to expose.
    let clean = isp::reconstruct(&setup.co, &setup.data, &weight, &rule).map_err(core_err)?;
    let result = isp::stability_sweep(
        &setup.co,
        &setup.data,
        &clean.b_hat,
        &weight,
        &rule,
        &isp_cfg.deltas,
        &seeds,
        mask,
    )
    .map_err(core_err)?;

    let rows: Vec<Vec<String>> = result
        .deltas
        .iter()
        .zip(&result.errors)
        .map(|(&d, &e)| vec![fmt_float(d), fmt_float(e)])
        .collect();
    sink.write_csv("sweep.csv", "delta,error", &rows)?;

    let mut body = JsonObject::new();
    body.string("command", "sweep")
        .float("fitted_slope", result.slope)
        .float_array("deltas", &result.deltas)
        .float_array("errors", &result.errors)
        .int("seeds", seeds.len() as i64)
        .float("lambda", lambda)
        .float("mu", cfg.carleman.mu)
        .float_or_null("epsilon", isp_cfg.epsilon);
    sink.write_json("sweep.json", &body)?;
    Ok(())
}
