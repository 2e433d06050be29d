//! The `psgam` command line: fit models to CSV data, save them as JSON
//! archives and query the archives for predictions, slopes and contrasts.
//!
//! Tables go to stdout (or `--out`), diagnostics to stderr. Failures print a
//! single `ERROR:<module>:<kind>: message` line and exit with 2 (bad input),
//! 3 (bad request) or 4 (numerical failure).

pub mod archive;
pub mod error;
pub mod grid;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use psgam::fit::{Criterion, FitOptions};
use psgam::inference::{
    kcheck, pairwise_contrasts, predict, slope, summarize, z_quantile, ContrastQuantity, PredictionRequest, Scale, EXCLUSION_NOTE,
};
use psgam::simulate::{growth_data, lactation_data, sin_data, tweedie_data, GrowthConfig};
use psgam::{fit_gam, parse_formula, Dataset, Family, Formula, Schema};

pub use archive::{DatasetFingerprint, ModelArchive, FORMAT_VERSION};
pub use error::CliError;
pub use grid::Table;

#[derive(Debug, Parser)]
#[command(name = "psgam", version, about = "Penalized-spline generalized additive models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and save it as a JSON archive.
    Fit(FitArgs),
    /// Predictions with credible intervals over a grid.
    Predict(PredictArgs),
    /// First derivatives of the response-scale mean.
    Slopes(SlopeArgs),
    /// Pairwise contrasts among the levels of a factor, BY-adjusted.
    Contrasts(ContrastArgs),
    /// Compare fitted models by AIC.
    Compare(CompareArgs),
    /// Basis-dimension diagnostics for each smooth.
    Check(CheckArgs),
    /// Write a seeded synthetic dataset.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON sidecar declaring response, weight and factor columns.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub formula: String,
    #[arg(long, default_value = "gaussian")]
    pub family: String,
    #[arg(long, default_value = "reml")]
    pub criterion: String,
    /// Factor columns, in addition to any in the schema.
    #[arg(long = "factor", value_delimiter = ',')]
    pub factors: Vec<String>,
    #[arg(long)]
    pub weight: Option<String>,
    /// Print the summary as JSON instead of a text table.
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV file or `var=lo:hi:n;fac=*` range syntax.
    #[arg(long)]
    pub grid: String,
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
    #[arg(long, default_value = "response")]
    pub scale: String,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SlopeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Evaluation points, CSV file or range syntax.
    #[arg(long)]
    pub at: String,
    #[arg(long)]
    pub wrt: String,
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ContrastArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Factor whose levels are compared.
    #[arg(long)]
    pub factor: String,
    /// Fixed numeric covariates, `name=value;...`.
    #[arg(long)]
    pub at: Option<String>,
    /// Shorthand for `--at day=<value>`.
    #[arg(long)]
    pub day: Option<f64>,
    #[arg(long, default_value = "mean")]
    pub quantity: String,
    /// Covariate to differentiate for `--quantity slope`; defaults to the
    /// single covariate fixed by `--at`/`--day`.
    #[arg(long)]
    pub wrt: Option<String>,
    #[arg(long)]
    pub within: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    /// `table` (aligned text) or `csv`.
    #[arg(long, default_value = "table")]
    pub format: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// sin, lactation, growth or tweedie.
    #[arg(long)]
    pub kind: String,
    /// Rows (sin, tweedie), weeks (lactation) or animals per treatment and
    /// sex (growth).
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the matching schema sidecar.
    #[arg(long)]
    pub schema_out: Option<PathBuf>,
}

/// Runs one command line, writing tables to `out` and diagnostics to `err`.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            let _ = writeln!(err, "{}", CliError::input("args", first));
            return error::EXIT_INPUT;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.code
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Fit(a) => cmd_fit(a, out),
        Command::Predict(a) => cmd_predict(a, out, err),
        Command::Slopes(a) => cmd_slopes(a, out, err),
        Command::Contrasts(a) => cmd_contrasts(a, out, err),
        Command::Compare(a) => cmd_compare(a, out),
        Command::Check(a) => cmd_check(a, out),
        Command::Simulate(a) => cmd_simulate(a, out),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::input("io", format!("cannot write {}: {e}", path.display()))
}

/// Writes to `--out` when given, else to stdout.
fn emit(path: Option<&Path>, bytes: &[u8], out: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| io_err(p, e)),
        None => out
            .write_all(bytes)
            .map_err(|e| CliError::input("io", format!("cannot write to stdout: {e}"))),
    }
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Left-aligned first column, right-aligned others.
fn text_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (j, c) in r.iter().enumerate() {
            width[j] = width[j].max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (j, c) in cells.iter().enumerate() {
            if j == 0 {
                s.push_str(&format!("{c:<w$}", w = width[0]));
            } else {
                s.push_str(&format!("  {c:>w$}", w = width[j]));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut s = line(header);
    for r in rows {
        s.push_str(&line(r));
    }
    s
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn num(v: f64) -> String {
    grid::fmt_num(v)
}

fn schema_for(a: &FitArgs, formula: &Formula) -> Result<Schema, CliError> {
    let mut schema = match &a.schema {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::from(psgam::data::DataError::Io {
                    path: p.display().to_string(),
                    message: e.to_string(),
                }))?;
            serde_json::from_str::<Schema>(&text)
                .map_err(|e| CliError::from(psgam::data::DataError::Schema(format!("{}: {e}", p.display()))))?
        }
        None => Schema::new(formula.response.clone()),
    };
    // Grouping factors named inside smooth terms are always factors.
    let implied = formula.terms.iter().flat_map(|t| t.factors.iter().cloned());
    for f in a.factors.iter().cloned().chain(implied) {
        if !schema.factors.contains(&f) {
            schema.factors.push(f);
        }
    }
    if a.weight.is_some() {
        schema.weight = a.weight.clone();
    }
    if a.schema.is_none() {
        // Read only the columns the formula uses, so unrelated text columns
        // need no declaration.
        let mut numeric: Vec<String> = Vec::new();
        for t in &formula.terms {
            for c in t.columns() {
                if !schema.factors.iter().any(|f| f == c) && !numeric.iter().any(|n| n == c) {
                    numeric.push(c.to_string());
                }
            }
        }
        schema.numeric = Some(numeric);
    }
    Ok(schema)
}

fn cmd_fit(a: FitArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let formula = parse_formula(&a.formula)?;
    let family: Family = a.family.parse()?;
    let criterion: Criterion = a.criterion.parse()?;
    let schema = schema_for(&a, &formula)?;
    let data = Dataset::load_csv(&a.data, &schema)?;
    if data.response_name() != formula.response {
        return Err(CliError::input(
            "schema",
            format!(
                "schema response `{}` differs from formula response `{}`",
                data.response_name(),
                formula.response
            ),
        ));
    }
    let model = fit_gam(&formula, &data, family, &FitOptions::criterion(criterion))?;
    let summary = summarize(&model);
    let archive = ModelArchive::new(model, &data);
    if let Some(p) = &a.out {
        archive.save(p)?;
    }
    let text = if a.json {
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"
    } else {
        summary.to_string()
    };
    emit(None, text.as_bytes(), out)
}

fn note_exclusion(exclude: &[String], err: &mut dyn Write) {
    if !exclude.is_empty() {
        let _ = writeln!(err, "note: {EXCLUSION_NOTE}");
    }
}

fn cmd_predict(a: PredictArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let archive = ModelArchive::load(&a.model)?;
    let model = &archive.model;
    let table = grid::load(model, &a.grid)?;
    let scale: Scale = a.scale.parse()?;
    let req = PredictionRequest {
        grid: table.grid()?,
        exclude: a.exclude.clone(),
        scale,
        level: a.level,
    };
    let p = predict(model, &req)?;
    note_exclusion(&a.exclude, err);
    let mut header = table.names();
    header.extend(strings(&["fit", "se", "ci_lower", "ci_upper"]));
    let rows = (0..table.n_rows()).map(|i| {
        let mut r = table.row(i);
        r.extend([num(p.fit[i]), num(p.se[i]), num(p.lower[i]), num(p.upper[i])]);
        r
    });
    emit(a.out.as_deref(), &csv_bytes(&header, rows), out)
}

fn cmd_slopes(a: SlopeArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let archive = ModelArchive::load(&a.model)?;
    let model = &archive.model;
    let table = grid::load(model, &a.at)?;
    let z = z_quantile(a.level)?;
    let s = slope(model, &table.grid()?, &a.wrt, &a.exclude)?;
    note_exclusion(&a.exclude, err);
    let mut header = table.names();
    header.extend(strings(&["slope", "se", "ci_lower", "ci_upper"]));
    let rows = s.iter().enumerate().map(|(i, s)| {
        let mut r = table.row(i);
        r.extend([num(s.slope), num(s.se), num(s.slope - z * s.se), num(s.slope + z * s.se)]);
        r
    });
    emit(a.out.as_deref(), &csv_bytes(&header, rows), out)
}

fn parse_at(text: &str) -> Result<Vec<(String, f64)>, CliError> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (n, v) = item
                .split_once('=')
                .ok_or_else(|| CliError::request("grid", format!("`{item}`: expected name=value")))?;
            let v: f64 = v
                .trim()
                .parse()
                .ok()
                .filter(|x: &f64| x.is_finite())
                .ok_or_else(|| CliError::request("grid", format!("`{item}`: value is not a number")))?;
            Ok((n.trim().to_string(), v))
        })
        .collect()
}

fn cmd_contrasts(a: ContrastArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let archive = ModelArchive::load(&a.model)?;
    let model = &archive.model;
    let mut at = match &a.at {
        Some(t) => parse_at(t)?,
        None => Vec::new(),
    };
    if let Some(d) = a.day {
        at.retain(|(n, _)| n != "day");
        at.push(("day".to_string(), d));
    }
    let quantity = match a.quantity.as_str() {
        "mean" => ContrastQuantity::Mean,
        "slope" => {
            let wrt = match (&a.wrt, at.as_slice()) {
                (Some(w), _) => w.clone(),
                (None, [(n, _)]) => n.clone(),
                _ => return Err(CliError::request("request", "--quantity slope needs --wrt")),
            };
            ContrastQuantity::Slope { wrt }
        }
        q => return Err(CliError::request("request", format!("unknown quantity `{q}` (expected mean or slope)"))),
    };
    let res = pairwise_contrasts(model, &at, &a.factor, a.within.as_deref(), &quantity, &a.exclude)?;
    note_exclusion(&a.exclude, err);
    let mut header = Vec::new();
    if let Some(w) = &a.within {
        header.push(w.clone());
    }
    header.extend(strings(&[
        "hypothesis", "estimate", "se", "z", "p_raw", "p_adjusted", "ci_lower", "ci_upper",
    ]));
    let rows = res.iter().map(|c| {
        let mut r = Vec::new();
        if a.within.is_some() {
            r.push(c.group.clone().unwrap_or_default());
        }
        r.push(c.hypothesis.clone());
        r.extend(
            [c.estimate, c.se, c.z, c.p_raw, c.p_adjusted, c.ci_lower, c.ci_upper]
                .into_iter()
                .map(num),
        );
        r
    });
    emit(a.out.as_deref(), &csv_bytes(&header, rows), out)
}

fn cmd_compare(a: CompareArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let csv_out = match a.format.as_str() {
        "table" => false,
        "csv" => true,
        f => return Err(CliError::input("args", format!("unknown format `{f}` (expected table or csv)"))),
    };
    let archives: Vec<(String, ModelArchive)> = a
        .models
        .iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            ModelArchive::load(p).map(|m| (name, m))
        })
        .collect::<Result<_, _>>()?;
    let (first_name, first) = &archives[0];
    for (name, m) in &archives[1..] {
        if m.response != first.response || m.model.y != first.model.y {
            return Err(CliError::request(
                "not_comparable",
                format!(
                    "`{name}` models `{}` but `{first_name}` models `{}` on different data; AIC values are not comparable",
                    m.response, first.response
                ),
            ));
        }
    }
    let mut order: Vec<usize> = (0..archives.len()).collect();
    order.sort_by(|&i, &j| archives[i].1.model.aic.total_cmp(&archives[j].1.model.aic));
    let best = archives[order[0]].1.model.aic;
    let header = strings(&["model", "family", "edf", "aic", "delta_aic", "deviance", "deviance_explained"]);
    let rows: Vec<Vec<String>> = order
        .iter()
        .map(|&i| {
            let (name, a) = &archives[i];
            let m = &a.model;
            if csv_out {
                vec![
                    name.clone(),
                    a.family.clone(),
                    num(m.edf_total),
                    num(m.aic),
                    num(m.aic - best),
                    num(m.deviance),
                    num(m.deviance_explained),
                ]
            } else {
                vec![
                    name.clone(),
                    a.family.clone(),
                    format!("{:.3}", m.edf_total),
                    format!("{:.3}", m.aic),
                    format!("{:.3}", m.aic - best),
                    format!("{:.4}", m.deviance),
                    format!("{:.4}", m.deviance_explained),
                ]
            }
        })
        .collect();
    let bytes = if csv_out {
        csv_bytes(&header, rows.into_iter())
    } else {
        text_table(&header, &rows).into_bytes()
    };
    emit(a.out.as_deref(), &bytes, out)
}

fn cmd_check(a: CheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let archive = ModelArchive::load(&a.model)?;
    let checks = kcheck(&archive.model, a.seed);
    let header = strings(&["term", "k", "edf", "k_index", "p", "flag"]);
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| {
            vec![
                c.label.clone(),
                c.k.to_string(),
                format!("{:.3}", c.edf),
                format!("{:.3}", c.index),
                format!("{:.3}", c.p),
                if c.flagged { "*" } else { "" }.to_string(),
            ]
        })
        .collect();
    let mut text = text_table(&header, &rows);
    if checks.iter().any(|c| c.flagged) {
        text.push_str("* basis dimension may be too small: EDF is close to k and residuals show pattern\n");
    }
    emit(None, text.as_bytes(), out)
}

fn cmd_simulate(a: SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::input("args", "--n must be positive"));
    }
    let data = match a.kind.as_str() {
        "sin" => sin_data(a.n, 0.2, 1.0, a.seed),
        "tweedie" => tweedie_data(a.n, 0.8, 1.6, a.seed),
        "lactation" => lactation_data(a.n, a.seed),
        "growth" => growth_data(
            &GrowthConfig {
                animals_per_cell: a.n,
                ..Default::default()
            },
            a.seed,
        ),
        k => {
            return Err(CliError::input(
                "args",
                format!("unknown kind `{k}` (expected sin, tweedie, lactation or growth)"),
            ))
        }
    };
    if let Some(p) = &a.schema_out {
        let text = serde_json::to_string_pretty(&data.schema()).expect("schema serializes") + "\n";
        fs::write(p, text).map_err(|e| io_err(p, e))?;
    }
    let mut buf = Vec::new();
    data.write_csv(&mut buf)?;
    emit(a.out.as_deref(), &buf, out)
}
