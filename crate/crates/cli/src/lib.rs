//! Command-line front end for `selbias`.
//!
//! Every subcommand writes either CSV (header plus rows) or a JSON envelope
//! with the keys `schema_version`, `command`, `params`, `payload` and
//! `diagnostics`, in that order.
//!
//! Exit codes: 0 on success, 1 when `validate` finds a failing check, 2 on
//! usage errors and 3 on numeric or domain errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{error::ErrorKind, Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde_json::{Map, Value};

use selbias::bias::{self, BiasOptions, Case};
use selbias::model::{GaussianSpec, ModelParams};
use selbias::mvn::{QmcConfig, QuadratureConfig};
use selbias::simulate::{self, SimConfig};
use selbias::truncmvn::{self, Numerics, TruncatedAboveSpec};
use selbias::validate::{self, Level};

pub mod output;

use output::{Cell, Envelope, Table};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Flags that take no value.
const SWITCHES: &[&str] = &["with-regression", "summary"];

#[derive(Debug, Parser)]
#[command(
    name = "selbias",
    version,
    about = "Post-selection posterior means and selection bias in the normal-normal model",
    allow_negative_numbers = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Selection bias and post-selection mean of the winning arm.
    Bias {
        #[command(flatten)]
        model: ModelArgs,
        /// Observed maximum.
        #[arg(long)]
        xp: f64,
        /// Absolute tolerance of the orthant-probability quadrature.
        #[arg(long)]
        tol: Option<f64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Bias over a grid of cases, arm counts and maxima.
    Table {
        #[arg(long)]
        sigma: f64,
        /// Comma-separated arm counts.
        #[arg(long, value_delimiter = ',', required = true)]
        p: Vec<usize>,
        /// Inclusive grid `start:stop:step`.
        #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
        xp: Grid,
        /// `gamma^2,eta^2`; repeat for several cases.
        #[arg(long = "case", value_parser = parse_case, required = true, allow_hyphen_values = true)]
        cases: Vec<CaseArg>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Probability that the largest observation exceeds `x`.
    Exceed {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        x: f64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Seeded simulation of winners.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 5000)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.25)]
        bin_width: f64,
        /// Add the least-squares line of mu* on x*.
        #[arg(long)]
        with_regression: bool,
        /// Emit binned conditional means instead of individual winners.
        #[arg(long)]
        summary: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Normalizing constant, boundary densities and means of a Gaussian
    /// truncated from above.
    Moments {
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        theta: Vec<f64>,
        /// Equicorrelated covariance `c,d` meaning `c I + d 11'`.
        #[arg(
            long,
            value_parser = parse_pair,
            required_unless_present = "omega_file",
            conflicts_with = "omega_file",
            allow_hyphen_values = true
        )]
        omega: Option<(f64, f64)>,
        /// CSV file holding the full covariance matrix, no header.
        #[arg(long)]
        omega_file: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        upper: Vec<f64>,
        /// Absolute tolerance of the orthant-probability quadrature.
        #[arg(long)]
        tol: Option<f64>,
        /// Seed of the lattice rule used for general covariances.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Runs the oracle suite.
    Validate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = LevelArg::Quick)]
        level: LevelArg,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Number of arms.
    #[arg(long)]
    p: usize,
    #[arg(long, required_unless_present = "gamma2", conflicts_with = "gamma2")]
    gamma: Option<f64>,
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long, required_unless_present = "eta2", conflicts_with = "eta2")]
    eta: Option<f64>,
    #[arg(long)]
    eta2: Option<f64>,
    #[arg(long)]
    sigma: f64,
}

impl ModelArgs {
    fn params(&self) -> selbias::Result<ModelParams> {
        let gamma = root(self.gamma, self.gamma2, "gamma^2")?;
        let eta = root(self.eta, self.eta2, "eta^2")?;
        ModelParams::new(self.p, gamma, eta, self.sigma)
    }
}

fn root(plain: Option<f64>, squared: Option<f64>, name: &str) -> selbias::Result<f64> {
    match (plain, squared) {
        (Some(v), _) => Ok(v),
        (None, Some(v)) if (0.0..=1.0).contains(&v) => Ok(v.sqrt()),
        (None, v) => Err(selbias::Error::InvalidParams(format!(
            "{name} must lie in [0, 1], got {}",
            v.unwrap_or(f64::NAN)
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct OutputArgs {
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LevelArg {
    Quick,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
struct Grid(Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq)]
struct CaseArg {
    gamma2: f64,
    eta2: f64,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected two comma-separated numbers, got `{s}`"));
    }
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
    Ok((num(parts[0])?, num(parts[1])?))
}

fn parse_case(s: &str) -> Result<CaseArg, String> {
    let (gamma2, eta2) = parse_pair(s)?;
    Ok(CaseArg { gamma2, eta2 })
}

/// `start:stop:step`, including `stop` when it lies on the lattice.
fn parse_grid(s: &str) -> Result<Grid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("expected start:stop:step, got `{s}`"));
    }
    let mut v = [0.0; 3];
    for (slot, t) in v.iter_mut().zip(&parts) {
        *slot = t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"))?;
        if !slot.is_finite() {
            return Err(format!("`{t}` is not finite"));
        }
    }
    let [start, stop, step] = v;
    if step <= 0.0 {
        return Err("step must be positive".into());
    }
    if stop < start {
        return Err("stop must not be below start".into());
    }
    let span = (stop - start) / step;
    let count = (span + 1e-9 * span.max(1.0)).floor();
    if count > 1e6 {
        return Err("grid has more than a million points".into());
    }
    Ok(Grid((0..=count as usize).map(|i| start + step * i as f64).collect()))
}

enum Failure {
    Usage(String),
    Numeric(String),
    Io(std::io::Error),
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e)
    }
}

fn numeric(command: &str) -> impl Fn(selbias::Error) -> Failure + '_ {
    move |e| Failure::Numeric(format!("{command}: {e}"))
}

/// The flags after the subcommand, echoed as typed, in order of
/// appearance. Repeated flags become arrays.
fn echo_params(args: &[String]) -> Map<String, Value> {
    let mut map = Map::new();
    let mut tokens = args.iter().skip(2);
    while let Some(token) = tokens.next() {
        let Some(flag) = token.strip_prefix("--") else { continue };
        let (name, value) = match flag.split_once('=') {
            Some((n, v)) => (n, Value::from(v)),
            None if SWITCHES.contains(&flag) => (flag, Value::Bool(true)),
            None => (flag, tokens.next().map_or(Value::Null, |v| Value::from(v.as_str()))),
        };
        match map.get_mut(name) {
            Some(Value::Array(list)) => list.push(value),
            Some(prev) => *prev = Value::Array(vec![prev.take(), value]),
            None => {
                map.insert(name.to_owned(), value);
            }
        }
    }
    map
}

fn quadrature_diagnostics(cfg: &QuadratureConfig) -> Map<String, Value> {
    let mut map = Map::new();
    map.insert("abs_tol".into(), cfg.abs_tol.into());
    map.insert("max_nodes".into(), cfg.max_nodes.into());
    map.insert("integration_halfwidth".into(), cfg.integration_halfwidth.into());
    map
}

fn quadrature(tol: Option<f64>) -> Result<QuadratureConfig, Failure> {
    let cfg = tol.map_or_else(QuadratureConfig::default, QuadratureConfig::with_tolerance);
    cfg.validate().map_err(|e| Failure::Usage(format!("--tol: {e}")))?;
    Ok(cfg)
}

fn model_cells(params: &ModelParams) -> Vec<Cell> {
    vec![
        params.p().into(),
        params.gamma().into(),
        params.eta().into(),
        params.sigma().into(),
    ]
}

struct Outcome {
    table: Table,
    diagnostics: Map<String, Value>,
    format: Format,
    exit: i32,
}

fn execute(command: Command) -> Result<Outcome, Failure> {
    let mut diagnostics = Map::new();
    let mut exit = EXIT_OK;
    let (table, format) = match command {
        Command::Bias { model, xp, tol, output } => {
            let params = model.params().map_err(numeric("bias"))?;
            let opts = BiasOptions {
                quadrature: quadrature(tol)?,
                ..BiasOptions::default()
            };
            let r = bias::selection_bias_with(&params, xp, &opts).map_err(numeric("bias"))?;
            let mut row = model_cells(&params);
            row.extend([
                xp.into(),
                r.naive_mean.into(),
                r.delta.into(),
                r.lambda.into(),
                r.marginal_density_value.into(),
                r.alpha.into(),
            ]);
            let columns = vec![
                "p", "gamma", "eta", "sigma", "xp", "naive_mean", "delta", "lambda", "marginal_density", "alpha",
            ];
            diagnostics.insert("tolerances".into(), quadrature_diagnostics(&opts.quadrature).into());
            (Table::scalar(columns, row), output.format)
        }
        Command::Table { sigma, p, xp, cases, output } => {
            let list: Vec<Case> = cases.iter().map(|c| Case::from_squared(c.gamma2, c.eta2)).collect();
            for c in &cases {
                root(None, Some(c.gamma2), "gamma^2").map_err(numeric("table"))?;
                root(None, Some(c.eta2), "eta^2").map_err(numeric("table"))?;
            }
            let rows = bias::bias_table(sigma, &p, &xp.0, &list).map_err(numeric("table"))?;
            let mut table = Table::rows(vec!["case", "gamma2", "eta2", "p", "xp", "naive_mean", "delta", "lambda"]);
            for row in rows {
                let c = cases[row.case - 1];
                let r = row.report;
                table.push(vec![
                    row.case.into(),
                    c.gamma2.into(),
                    c.eta2.into(),
                    r.params.p().into(),
                    r.xp.into(),
                    r.naive_mean.into(),
                    r.delta.into(),
                    r.lambda.into(),
                ]);
            }
            diagnostics.insert(
                "tolerances".into(),
                quadrature_diagnostics(&QuadratureConfig::default()).into(),
            );
            (table, output.format)
        }
        Command::Exceed { model, x, output } => {
            let params = model.params().map_err(numeric("exceed"))?;
            let prob = bias::max_exceedance_probability(&params, x).map_err(numeric("exceed"))?;
            let mut row = model_cells(&params);
            row.extend([x.into(), prob.into()]);
            let columns = vec!["p", "gamma", "eta", "sigma", "x", "exceedance_probability"];
            diagnostics.insert(
                "tolerances".into(),
                quadrature_diagnostics(&QuadratureConfig::default()).into(),
            );
            (Table::scalar(columns, row), output.format)
        }
        Command::Simulate {
            model,
            reps,
            seed,
            bin_width,
            with_regression,
            summary,
            output,
        } => {
            let params = model.params().map_err(numeric("simulate"))?;
            let cfg = SimConfig {
                bin_width,
                ..SimConfig::new(params, reps, seed)
            };
            let pairs = simulate::winner_pairs(&cfg).map_err(numeric("simulate"))?;
            let fit = if with_regression {
                Some(simulate::regression_fit(&pairs).map_err(numeric("simulate"))?)
            } else {
                None
            };
            let mut columns = if summary {
                vec!["center", "count", "mean_mu", "std_error"]
            } else {
                vec!["replication", "winner_index", "x_star", "mu_star"]
            };
            if fit.is_some() {
                columns.extend(["intercept", "slope", "fitted"]);
            }
            let mut table = Table::rows(columns);
            let with_fit = |mut row: Vec<Cell>, x: f64| {
                if let Some(f) = fit {
                    row.extend([f.intercept.into(), f.slope.into(), f.predict(x).into()]);
                }
                row
            };
            if summary {
                for b in simulate::binned_conditional_mean(&pairs, bin_width) {
                    let row = vec![b.center.into(), b.count.into(), b.mean_mu.into(), b.std_error.into()];
                    table.push(with_fit(row, b.center));
                }
            } else {
                for (i, w) in pairs.iter().enumerate() {
                    let row = vec![i.into(), w.winner_index.into(), w.x_star.into(), w.mu_star.into()];
                    table.push(with_fit(row, w.x_star));
                }
            }
            diagnostics.insert("seed".into(), seed.into());
            diagnostics.insert("reps".into(), reps.into());
            diagnostics.insert("bin_width".into(), bin_width.into());
            (table, output.format)
        }
        Command::Moments {
            theta,
            omega,
            omega_file,
            upper,
            tol,
            seed,
            output,
        } => {
            let base = match (omega, omega_file) {
                (Some((c, d)), _) => GaussianSpec::equicorrelated(theta.clone(), c, d),
                (None, Some(path)) => {
                    let cov = read_matrix(&path)?;
                    GaussianSpec::general(theta.clone(), cov)
                }
                (None, None) => unreachable!("clap requires one covariance form"),
            }
            .map_err(numeric("moments"))?;
            let numerics = Numerics {
                quadrature: quadrature(tol)?,
                qmc: QmcConfig {
                    seed,
                    ..QmcConfig::default()
                },
            };
            let engine = if base.equicorrelation().is_some() { "quadrature" } else { "lattice" };
            let spec = TruncatedAboveSpec::with_numerics(base, upper.clone(), numerics).map_err(numeric("moments"))?;
            let densities = truncmvn::densities_at_bounds(&spec).map_err(numeric("moments"))?;
            let means = truncmvn::truncated_mean(&spec).map_err(numeric("moments"))?;
            let mut table = Table::rows(vec!["index", "theta", "upper", "alpha", "density_at_bound", "truncated_mean"]);
            for i in 0..spec.dim() {
                table.push(vec![
                    i.into(),
                    theta[i].into(),
                    upper[i].into(),
                    spec.alpha().into(),
                    densities[i].into(),
                    means[i].into(),
                ]);
            }
            let mut tolerances = quadrature_diagnostics(&numerics.quadrature);
            if engine == "lattice" {
                tolerances.insert("qmc_samples".into(), numerics.qmc.samples.into());
                tolerances.insert("qmc_replicates".into(), numerics.qmc.replicates.into());
            }
            diagnostics.insert("engine".into(), engine.into());
            diagnostics.insert("tolerances".into(), tolerances.into());
            diagnostics.insert("seed".into(), seed.into());
            (table, output.format)
        }
        Command::Validate { seed, level, output } => {
            let level = match level {
                LevelArg::Quick => Level::Quick,
                LevelArg::Full => Level::Full,
            };
            let report = validate::run(level, seed).map_err(numeric("validate"))?;
            let mut table = Table::rows(vec!["check", "passed", "cases", "worst_ratio", "detail"]);
            for c in &report.checks {
                table.push(vec![
                    c.name.into(),
                    c.passed.into(),
                    c.cases.into(),
                    c.worst_ratio.into(),
                    c.detail.clone().into(),
                ]);
            }
            if !report.passed() {
                exit = EXIT_CHECK_FAILED;
            }
            diagnostics.insert("seed".into(), seed.into());
            diagnostics.insert("passed".into(), report.passed().into());
            (table, output.format)
        }
    };
    Ok(Outcome {
        table,
        diagnostics,
        format,
        exit,
    })
}

fn read_matrix(path: &PathBuf) -> Result<DMatrix<f64>, Failure> {
    let usage = |msg: String| Failure::Usage(format!("--omega-file {}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| usage(e.to_string()))?;
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| usage(e.to_string()))?;
        for field in record.iter() {
            values.push(field.parse::<f64>().map_err(|e| usage(format!("`{field}`: {e}")))?);
        }
        rows += 1;
    }
    if rows == 0 || values.len() != rows * rows {
        return Err(usage(format!("expected a square matrix, got {} values in {rows} rows", values.len())));
    }
    Ok(DMatrix::from_row_slice(rows, rows, &values))
}

/// Parses `args` (program name first), runs the subcommand and writes its
/// output. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    let text: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let command = text.get(1).cloned().unwrap_or_default();
    let start = Instant::now();
    let result = execute(cli.command).and_then(|outcome| {
        match outcome.format {
            Format::Csv => outcome.table.write_csv(&mut *out)?,
            Format::Json => {
                let mut diagnostics = outcome.diagnostics;
                diagnostics.insert("runtime_seconds".into(), start.elapsed().as_secs_f64().into());
                Envelope {
                    command: &command,
                    params: echo_params(&text),
                    payload: &outcome.table,
                    diagnostics,
                }
                .write_json(&mut *out)?;
            }
        }
        Ok(outcome.exit)
    });
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Numeric(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_NUMERIC
        }
        Err(Failure::Io(e)) => {
            let _ = writeln!(err, "error: writing output: {e}");
            EXIT_NUMERIC
        }
    }
}
