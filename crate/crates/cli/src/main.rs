//! `wlasso`: weighted Lasso fits, Monte Carlo verification experiments and
//! factor diagnostics.
//!
//! Exit codes: 0 success, 1 usage error, 2 ingestion error, 3 numerical
//! failure.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wlasso_core::analysis::{penalty_level, CalibrationMode, DataSummary};
use wlasso_core::multistage::run_recursion;
use wlasso_core::solver::fit_weighted_lasso;
use wlasso_core::{
    ingest_csv, render_report, run_experiment, Error, ExperimentConfig, ExperimentKind, FitConfig,
    FitReport, LambdaChoice, MultistageConfig, PenaltyKind, PenaltySpec, Report, ReportFormat,
};

#[derive(Parser, Debug)]
#[command(
    name = "wlasso",
    version,
    about = "Weighted l1-penalized GLM fits and oracle-inequality experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a CSV data set, or run replicated fits on synthetic data.
    Fit(FitArgs),
    /// Solution paths on synthetic data with per-level error bounds.
    Path(Common),
    /// Multistage adaptive refits and their contraction radii.
    Multistage(Common),
    /// Check the oracle inequalities on replicates where their events hold.
    OracleVerify(Common),
    /// Check the sign-recovery predictions.
    SelectionVerify(Common),
    /// Check the bound on the number of false positives.
    SparsityVerify(Common),
    /// Invertibility, selection and sparsity reports for one design.
    Diagnostics(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML experiment description; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    format: Option<ReportFormat>,
    /// Rescale design columns to |x_j|_2^2 = n.
    #[arg(long, overrides_with = "no_standardize")]
    standardize: bool,
    #[arg(long)]
    no_standardize: bool,
    #[arg(long)]
    replicates: Option<usize>,
    /// linear, logistic or poisson.
    #[arg(long)]
    family: Option<String>,
    /// l1, mcp[:gamma] or scad[:a].
    #[arg(long)]
    penalty: Option<String>,
    /// A positive number, or `auto` for the calibrated level.
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    eps0: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    s0_size: Option<usize>,
    #[arg(long)]
    beta_min: Option<f64>,
    #[arg(long)]
    beta_max: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    stages: Option<usize>,
    /// identity, gaussian_iid or gaussian_correlated:<rho>.
    #[arg(long)]
    design: Option<String>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    /// CSV file whose last column is the response.
    #[arg(long)]
    data: Option<PathBuf>,
    /// The CSV file starts with a header row.
    #[arg(long)]
    header: bool,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Ingestion(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Ingestion(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Ingestion(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            e if e.is_ingestion() => Failure::Ingestion(e.to_string()),
            Error::Domain(_) => Failure::Usage(e.to_string()),
            e => Failure::Numerical(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("wlasso: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (kind, common) = match &cli.command {
        Command::Fit(a) => {
            if let Some(path) = &a.data {
                return fit_file(path, a.header, &a.common);
            }
            (ExperimentKind::Fit, &a.common)
        }
        Command::Path(c) => (ExperimentKind::Path, c),
        Command::Multistage(c) => (ExperimentKind::Multistage, c),
        Command::OracleVerify(c) => (ExperimentKind::OracleVerify, c),
        Command::SelectionVerify(c) => (ExperimentKind::SelectionVerify, c),
        Command::SparsityVerify(c) => (ExperimentKind::SparsityVerify, c),
        Command::Diagnostics(c) => (ExperimentKind::Diagnostics, c),
    };
    let verify = matches!(
        kind,
        ExperimentKind::OracleVerify
            | ExperimentKind::SelectionVerify
            | ExperimentKind::SparsityVerify
    );
    if verify && common.seed.is_none() {
        return Err(Failure::Usage(format!(
            "--seed is required for {}",
            kind.name().replace('_', "-")
        )));
    }
    let config = load_config(kind, common)?;
    let result = run_experiment(&config)?;
    let a = &result.aggregates;
    eprintln!(
        "{}: {} replicates, {} failed, {} in-event violations",
        kind, a.count, a.failed, a.total_violations
    );
    write_report(&result, config.format, config.output.as_ref())
}

fn load_config(kind: ExperimentKind, c: &Common) -> Result<ExperimentConfig, Failure> {
    let mut table = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Ingestion(format!("cannot read {}: {e}", path.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    if let Some(existing) = table.get("experiment").and_then(|v| v.as_str()) {
        let named: ExperimentKind = existing.parse()?;
        if named != kind {
            return Err(Failure::Usage(format!(
                "the configuration describes a {named} experiment but the subcommand is {kind}"
            )));
        }
    }
    table.insert("experiment".into(), kind.name().into());
    let mut set = |key: &str, v: toml::Value| {
        table.insert(key.to_string(), v);
    };
    if let Some(v) = c.seed {
        let v = i64::try_from(v)
            .map_err(|_| Failure::Usage(format!("seed {v} exceeds the configuration range")))?;
        set("seed", v.into());
    }
    if let Some(v) = &c.output {
        set("output", v.display().to_string().into());
    }
    if let Some(v) = c.format {
        set(
            "format",
            if v == ReportFormat::Csv {
                "csv"
            } else {
                "json"
            }
            .into(),
        );
    }
    if c.standardize {
        set("standardize", true.into());
    }
    if c.no_standardize {
        set("standardize", false.into());
    }
    for (key, v) in [
        ("replicates", c.replicates),
        ("n", c.n),
        ("p", c.p),
        ("s0_size", c.s0_size),
        ("stages", c.stages),
    ] {
        if let Some(v) = v {
            set(key, (v as i64).into());
        }
    }
    for (key, v) in [
        ("xi", c.xi),
        ("eps0", c.eps0),
        ("beta_min", c.beta_min),
        ("beta_max", c.beta_max),
        ("sigma2", c.sigma2),
    ] {
        if let Some(v) = v {
            set(key, v.into());
        }
    }
    if let Some(v) = &c.family {
        let fam: wlasso_core::FamilyKind = v.parse()?;
        set("family", fam.to_string().into());
    }
    if let Some(v) = &c.penalty {
        let pen: PenaltyKind = v.parse()?;
        set("penalty", pen.to_string().into());
    }
    if let Some(v) = &c.lambda {
        match v.parse::<LambdaChoice>()? {
            LambdaChoice::Auto => set("lambda", "auto".into()),
            LambdaChoice::Value(x) => set("lambda", x.into()),
        }
    }
    if let Some(v) = &c.design {
        set("design", design_value(v)?);
    }
    if !table.contains_key("n") || !table.contains_key("p") {
        return Err(Failure::Usage(
            "n and p must be given in the configuration or with --n and --p".to_string(),
        ));
    }
    let config: ExperimentConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Failure::Usage(format!("invalid configuration: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn design_value(s: &str) -> Result<toml::Value, Failure> {
    let mut t = toml::Table::new();
    let s = s.trim().to_ascii_lowercase().replace('-', "_");
    match s.split_once(':') {
        None if s == "identity" || s == "gaussian_iid" => {
            t.insert("kind".into(), s.into());
        }
        Some(("gaussian_correlated", rho)) => {
            let rho: f64 = rho
                .parse()
                .map_err(|_| Failure::Usage(format!("invalid correlation `{rho}`")))?;
            t.insert("kind".into(), "gaussian_correlated".into());
            t.insert("rho".into(), rho.into());
        }
        _ => {
            return Err(Failure::Usage(format!(
                "unknown design `{s}`; expected identity, gaussian_iid or gaussian_correlated:<rho>"
            )))
        }
    }
    Ok(toml::Value::Table(t))
}

fn write_report<R: Report + ?Sized>(
    report: &R,
    format: ReportFormat,
    output: Option<&PathBuf>,
) -> Result<(), Failure> {
    let text = render_report(report, format)?;
    match output {
        Some(path) => fs::write(path, text)
            .map_err(|e| Failure::Ingestion(format!("cannot write {}: {e}", path.display()))),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Ingestion(format!("cannot write to standard output: {e}"))),
    }
}

/// Fits user data: a single Lasso for `l1`, the multistage recursion for
/// the nonconvex penalties.
fn fit_file(path: &PathBuf, header: bool, c: &Common) -> Result<(), Failure> {
    let mut data = ingest_csv(path, header)?;
    if c.standardize {
        data = data.standardized()?;
    }
    let family = match &c.family {
        Some(f) => wlasso_core::GlmFamily::new(f.parse()?),
        None => wlasso_core::GlmFamily::linear(),
    };
    let family = family.with_sigma2(c.sigma2.unwrap_or(1.0))?;
    data.validate_for(&family)?;
    let lambda = match c
        .lambda
        .as_deref()
        .map(str::parse::<LambdaChoice>)
        .transpose()?
    {
        Some(LambdaChoice::Value(v)) => v,
        _ => {
            let summary = DataSummary::from_dataset(&data, &family);
            penalty_level(
                &family,
                &summary,
                c.eps0.unwrap_or(0.05),
                &CalibrationMode::BoundedCurvature,
            )?
            .lambda0
        }
    };
    let penalty: PenaltyKind = match &c.penalty {
        Some(p) => p.parse()?,
        None => PenaltyKind::L1,
    };
    let format = c.format.unwrap_or_default();
    if penalty == PenaltyKind::L1 {
        let fit = fit_weighted_lasso(&data, &family, &FitConfig::lasso(lambda, data.p()))?;
        let report = FitReport {
            family: family.kind,
            lambda,
            standardized: c.standardize,
            n: data.n(),
            p: data.p(),
            fit,
        };
        return write_report(&report, format, c.output.as_ref());
    }
    let mut mconfig = MultistageConfig::new(PenaltySpec::new(penalty, lambda)?, data.p());
    if let Some(s) = c.stages {
        mconfig.stages = s;
    }
    let trace = run_recursion(&data, &family, &mconfig)?;
    write_report(&trace, format, c.output.as_ref())
}
