//! `hkfit`: fit, inspect and simulate entirely monotone and Hardy-Krause
//! variation constrained least squares estimators.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hkfit::design::{build_componentwise_min, detect_lattice, vc_bound};
use hkfit::estimators::{fit, predict_many, EstimatorKind, ModelFile, DENSE_COLUMN_LIMIT};
use hkfit::sim::{
    preset, run_current_status, run_risk_experiment, DesignSpec, ExperimentSpec, Preset,
    RiskReport, TestFunction, VPolicy, PRESET_NAMES,
};
use hkfit::solvers::SolverConfig;
use hkfit::variation::hk0_variation_coeffs;
use hkfit::{LatticeGrid, Point};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXIT_INVALID: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "hkfit",
    version,
    about = "Entirely monotone and Hardy-Krause variation constrained least squares"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit an estimator to a CSV with header x1,...,xd,y and write the model JSON.
    Fit(FitArgs),
    /// Evaluate a model at the points of a CSV (header x1,...,xd, optional y column).
    Predict(PredictArgs),
    /// Print the Hardy-Krause variation (anchored at 0) of a model.
    Variation(VariationArgs),
    /// Report the size of the design matrix of a CSV of points.
    Design(DesignArgs),
    /// Run a seeded risk experiment and emit n, r_n, stderr as CSV.
    Simulate(SimulateArgs),
    /// Bivariate current status study with F0(x) = (x1^2 x2 + x1 x2^2) / 2.
    CurrentStatus(CurrentStatusArgs),
}

#[derive(Args, Debug, Clone)]
struct SolverArgs {
    /// KKT residual tolerance for convergence.
    #[arg(long)]
    tol: Option<f64>,
    /// Iteration cap for the solver.
    #[arg(long = "max-iter")]
    max_iter: Option<usize>,
}

impl SolverArgs {
    fn config(&self, base: SolverConfig) -> Result<SolverConfig, Failure> {
        let mut cfg = base;
        if let Some(t) = self.tol {
            cfg.kkt_tol = t;
        }
        if let Some(m) = self.max_iter {
            cfg.max_iter = m;
        }
        cfg.validate().map_err(Failure::invalid)?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Input CSV.
    input: PathBuf,
    /// Output model JSON (alternative to --out; stdout if neither is given).
    output: Option<PathBuf>,
    /// Estimator: em, hk or em-capped.
    #[arg(long, default_value = "em")]
    estimator: EstimatorKind,
    /// Variation bound for hk and em-capped; accepts `inf`.
    #[arg(long = "V")]
    v: Option<f64>,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output model JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Model JSON written by `fit`.
    model: PathBuf,
    /// CSV of points.
    input: PathBuf,
    /// Truncate predictions to [0, 1].
    #[arg(long)]
    clamp: bool,
    /// Output CSV (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VariationArgs {
    /// Model JSON.
    model: PathBuf,
}

#[derive(Args, Debug)]
struct DesignArgs {
    /// CSV of points (header x1,...,xd, optional y column).
    input: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Named experiment: checkered, fig1 ... fig5, current-status.
    #[arg(long)]
    preset: Option<String>,
    /// Test function: additive_linear, two_step, neg_corner, checkered, current_status_cdf.
    #[arg(long)]
    function: Option<String>,
    /// Lattice dimensions such as 50,50; repeat for several grids.
    #[arg(long)]
    grid: Vec<String>,
    /// Noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// Trials per grid.
    #[arg(long)]
    trials: Option<usize>,
    /// Estimator: em, hk or em-capped.
    #[arg(long)]
    estimator: Option<EstimatorKind>,
    /// Explicit variation bound (default: the test function's own variation).
    #[arg(long = "V")]
    v: Option<f64>,
    /// Base seed of the per-trial streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output CSV (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output JSON with the full report and slopes (stderr summary if omitted).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CurrentStatusArgs {
    /// Only `current-status` is accepted; provided for symmetry with simulate.
    #[arg(long)]
    preset: Option<String>,
    /// Number of observations.
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Truncate predictions to [0, 1] when scoring.
    #[arg(long)]
    clamp: bool,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output model JSON (the summary goes to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(e: impl fmt::Display) -> Self {
        Failure {
            code: EXIT_INVALID,
            message: e.to_string(),
        }
    }
}

fn io_error(path: &Path, e: impl fmt::Display) -> Failure {
    Failure::invalid(format!("{}: {e}", path.display()))
}

type Outcome = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Variation(a) => cmd_variation(a),
        Command::Design(a) => cmd_design(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::CurrentStatus(a) => cmd_current_status(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

// ------------------------------------------------------------------ CSV

struct Table {
    points: Vec<Point>,
    y: Option<Vec<f64>>,
}

/// Reads `x1..xd[,y]`; `need_y` makes the y column mandatory.
fn read_csv(path: &Path, need_y: bool) -> Result<Table, Failure> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_error(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| io_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let has_y = header.last().is_some_and(|h| h == "y");
    let d = header.len() - usize::from(has_y);
    if d == 0
        || header[..d]
            .iter()
            .enumerate()
            .any(|(j, h)| *h != format!("x{}", j + 1))
    {
        return Err(io_error(
            path,
            format!(
                "header must be x1,...,xd{}, got {}",
                if need_y { ",y" } else { "[,y]" },
                header.join(",")
            ),
        ));
    }
    if need_y && !has_y {
        return Err(io_error(path, "missing y column"));
    }
    let mut points = Vec::new();
    let mut y = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| io_error(path, e))?;
        let values = record
            .iter()
            .map(|field| match field.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(io_error(
                    path,
                    format!("line {line}: not a finite number: {field:?}"),
                )),
            })
            .collect::<Result<Vec<f64>, Failure>>()?;
        let p = Point::new(values[..d].to_vec())
            .map_err(|e| io_error(path, format!("line {line}: {e}")))?;
        points.push(p);
        if has_y {
            y.push(values[d]);
        }
    }
    if points.is_empty() {
        return Err(io_error(path, "no data rows"));
    }
    Ok(Table {
        points,
        y: has_y.then_some(y),
    })
}

fn write_output(path: Option<&Path>, contents: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, contents).map_err(|e| io_error(p, e)),
        None => io::stdout()
            .write_all(contents.as_bytes())
            .map_err(Failure::invalid),
    }
}

fn csv_string(
    header: &[String],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<String, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(Failure::invalid)?;
    for row in rows {
        w.write_record(&row).map_err(Failure::invalid)?;
    }
    let bytes = w.into_inner().map_err(Failure::invalid)?;
    String::from_utf8(bytes).map_err(Failure::invalid)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn read_model(path: &Path) -> Result<ModelFile, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    ModelFile::from_json(&text).map_err(|e| io_error(path, e))
}

// ------------------------------------------------------------------ commands

fn cmd_fit(a: FitArgs) -> Outcome {
    if a.output.is_some() && a.out.is_some() {
        return Err(Failure::invalid(
            "give the output path either positionally or with --out, not both",
        ));
    }
    if a.estimator.needs_bound() && a.v.is_none() {
        return Err(Failure::invalid(format!(
            "--V is required for estimator {}",
            a.estimator
        )));
    }
    if !a.estimator.needs_bound() && a.v.is_some() {
        return Err(Failure::invalid("--V only applies to hk and em-capped"));
    }
    let cfg = a.solver.config(SolverConfig::default())?;
    let table = read_csv(&a.input, true)?;
    let y = table.y.expect("checked by read_csv");
    let model = fit(a.estimator, &table.points, &y, a.v, &cfg).map_err(Failure::invalid)?;
    let json = model.to_file().to_json().map_err(Failure::invalid)?;
    let out = a.output.as_deref().or(a.out.as_deref());
    write_output(out, &(json + "\n"))?;

    let diag = &model.diagnostics;
    let summary = [
        format!("n {}", y.len()),
        format!("p {}", diag.columns),
        format!("anchors {}", model.function.anchors().len()),
        format!("objective {}", diag.objective),
        format!("kkt_residual {}", diag.kkt_residual),
        format!("V_HK0 {}", hk0_variation_coeffs(&model.function)),
    ];
    // the summary moves to stderr when the model itself goes to stdout
    for line in summary {
        if out.is_some() {
            println!("{line}");
        } else {
            eprintln!("{line}");
        }
    }
    if !diag.converged {
        eprintln!(
            "warning: solver did not converge (kkt_residual {}, {} iterations)",
            diag.kkt_residual, diag.iterations
        );
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(0)
}

fn cmd_predict(a: PredictArgs) -> Outcome {
    let model = read_model(&a.model)?;
    let f = model.function().map_err(Failure::invalid)?;
    let table = read_csv(&a.input, false)?;
    let mut yhat = predict_many(&f, &table.points).map_err(|e| io_error(&a.input, e))?;
    if a.clamp {
        yhat.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    let d = f.d();
    let header: Vec<String> = (1..=d)
        .map(|j| format!("x{j}"))
        .chain(["yhat".to_string()])
        .collect();
    let rows = table.points.iter().zip(&yhat).map(|(p, v)| {
        p.iter()
            .map(|c| c.to_string())
            .chain([v.to_string()])
            .collect()
    });
    write_output(a.out.as_deref(), &csv_string(&header, rows)?)?;
    Ok(0)
}

fn cmd_variation(a: VariationArgs) -> Outcome {
    let model = read_model(&a.model)?;
    let f = model.function().map_err(Failure::invalid)?;
    println!("{}", hk0_variation_coeffs(&f));
    Ok(0)
}

fn cmd_design(a: DesignArgs) -> Outcome {
    let table = read_csv(&a.input, false)?;
    let xs = &table.points;
    let (n, d) = (xs.len(), xs[0].dim());
    let bound = vc_bound(n as u64, d as u32).map_err(Failure::invalid)?;
    let (p, layout) = match detect_lattice(xs) {
        Some(layout) => (
            layout.grid.len(),
            Some(
                layout
                    .grid
                    .dims()
                    .iter()
                    .map(|k| k.to_string())
                    .collect::<Vec<_>>()
                    .join("x"),
            ),
        ),
        None if bound <= DENSE_COLUMN_LIMIT => (
            build_componentwise_min(xs).map_err(Failure::invalid)?.p(),
            None,
        ),
        None => {
            return Err(Failure::invalid(format!(
                "design has up to {bound} columns; enumeration is limited to {DENSE_COLUMN_LIMIT}"
            )))
        }
    };
    println!("n {n}");
    println!("d {d}");
    println!("p {p}");
    println!("lattice {}", layout.as_deref().unwrap_or("no"));
    println!("vc_bound {bound}");
    Ok(0)
}

fn parse_function(name: &str) -> Result<TestFunction, Failure> {
    Ok(match name {
        "additive_linear" => TestFunction::AdditiveLinear,
        "two_step" => TestFunction::TwoStep,
        "neg_corner" => TestFunction::NegCorner,
        "checkered" => TestFunction::Checkered,
        "current_status_cdf" => TestFunction::CurrentStatusCdf,
        other => return Err(Failure::invalid(format!("unknown function '{other}'"))),
    })
}

fn parse_grid(s: &str) -> Result<LatticeGrid, Failure> {
    let dims = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Failure::invalid(format!("bad grid '{s}'")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    LatticeGrid::new(dims).map_err(Failure::invalid)
}

fn cmd_simulate(a: SimulateArgs) -> Outcome {
    let base = match a.preset.as_deref() {
        Some(name) => {
            match preset(name, a.seed) {
                Some(Preset::Risk(spec)) => Some(spec),
                Some(Preset::CurrentStatus { n, seed }) => {
                    if a.function.is_some()
                        || !a.grid.is_empty()
                        || a.sigma.is_some()
                        || a.estimator.is_some()
                        || a.v.is_some()
                        || a.trials.is_some()
                    {
                        return Err(Failure::invalid("the current-status preset only takes --seed, --tol, --max-iter and --out"));
                    }
                    return cmd_current_status(CurrentStatusArgs {
                        preset: None,
                        n,
                        seed,
                        clamp: false,
                        solver: a.solver,
                        out: a.out,
                    });
                }
                None => {
                    return Err(Failure::invalid(format!(
                        "unknown preset '{name}' (known: {})",
                        PRESET_NAMES.join(", ")
                    )))
                }
            }
        }
        None => None,
    };
    let mut spec = match base {
        Some(spec) => spec,
        None => {
            let function = parse_function(
                a.function
                    .as_deref()
                    .ok_or_else(|| Failure::invalid("give --preset or --function"))?,
            )?;
            if a.grid.is_empty() {
                return Err(Failure::invalid("--grid is required without --preset"));
            }
            ExperimentSpec {
                function,
                designs: Vec::new(),
                sigma: 1.0,
                trials: 20,
                kind: EstimatorKind::Hk,
                v_policy: VPolicy::Oracle,
                seed: a.seed,
                solver: SolverConfig::default(),
            }
        }
    };
    if let Some(name) = a.function.as_deref() {
        spec.function = parse_function(name)?;
    }
    if !a.grid.is_empty() {
        spec.designs = a
            .grid
            .iter()
            .map(|g| parse_grid(g).map(DesignSpec::Lattice))
            .collect::<Result<_, _>>()?;
    }
    if let Some(s) = a.sigma {
        spec.sigma = s;
    }
    if let Some(t) = a.trials {
        spec.trials = t;
    }
    if let Some(k) = a.estimator {
        spec.kind = k;
    }
    if let Some(v) = a.v {
        spec.v_policy = VPolicy::Explicit(v);
    }
    spec.seed = a.seed;
    spec.solver = a.solver.config(spec.solver)?;
    spec.validate().map_err(Failure::invalid)?;

    let report = run_risk_experiment(&spec).map_err(Failure::invalid)?;
    write_output(a.out.as_deref(), &risk_csv(&report)?)?;
    let json = serde_json::to_string_pretty(&report).map_err(Failure::invalid)?;
    match a.report.as_deref() {
        Some(p) => fs::write(p, json + "\n").map_err(|e| io_error(p, e))?,
        None => eprintln!(
            "slopes {}",
            serde_json::to_string(&report.slopes).map_err(Failure::invalid)?
        ),
    }
    if report.excluded() > 0 {
        eprintln!(
            "warning: {} trials excluded for non-convergence",
            report.excluded()
        );
    }
    Ok(0)
}

fn risk_csv(report: &RiskReport) -> Result<String, Failure> {
    let header: Vec<String> = ["n", "r_n", "stderr", "excluded"]
        .map(String::from)
        .to_vec();
    let rows = report.grids.iter().map(|g| {
        vec![
            g.n.to_string(),
            fmt_opt(g.mean_loss),
            fmt_opt(g.std_error),
            g.excluded.to_string(),
        ]
    });
    csv_string(&header, rows)
}

fn cmd_current_status(a: CurrentStatusArgs) -> Outcome {
    if let Some(p) = a.preset.as_deref() {
        if p != "current-status" {
            return Err(Failure::invalid(format!(
                "current-status does not take preset '{p}'"
            )));
        }
    }
    let cfg = a.solver.config(SolverConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let report = run_current_status(a.n, &mut rng, a.clamp, &cfg).map_err(Failure::invalid)?;
    if let Some(p) = a.out.as_deref() {
        let json = report.model.to_file().to_json().map_err(Failure::invalid)?;
        fs::write(p, json + "\n").map_err(|e| io_error(p, e))?;
    }
    let summary =
        serde_json::to_string_pretty(&report.summary(a.clamp)).map_err(Failure::invalid)?;
    println!("{summary}");
    if !report.model.diagnostics.converged {
        eprintln!("warning: solver did not converge");
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(0)
}
