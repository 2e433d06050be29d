//! Evaluation grids from the range syntax or from a CSV file.
//!
//! Range syntax is a `;`-separated list of `name=spec` items, where spec is
//! `lo:hi:n` (n evenly spaced values), `*` (every level of a model factor)
//! or a comma-separated list of values. The grid is the Cartesian product
//! with factors outermost, then numeric columns; within each group the
//! last-listed column varies fastest.

use std::path::Path;

use psgam::inference::factor_levels;
use psgam::{FittedModel, Grid, GridColumn};

use crate::error::CliError;

/// A grid that remembers the order its columns were given in.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<(String, GridColumn)>,
}

impl Table {
    pub fn n_rows(&self) -> usize {
        self.columns.first().map(|(_, c)| col_len(c)).unwrap_or(0)
    }

    pub fn grid(&self) -> Result<Grid, CliError> {
        Ok(Grid::new(self.columns.clone())?)
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Cell `row` of every column, rendered for CSV.
    pub fn row(&self, row: usize) -> Vec<String> {
        self.columns
            .iter()
            .map(|(_, c)| match c {
                GridColumn::Numeric(v) => fmt_num(v[row]),
                GridColumn::Labels(v) => v[row].clone(),
            })
            .collect()
    }
}

fn col_len(c: &GridColumn) -> usize {
    match c {
        GridColumn::Numeric(v) => v.len(),
        GridColumn::Labels(v) => v.len(),
    }
}

/// Shortest round-trip form, in exponent notation for very small or very
/// large magnitudes.
pub fn fmt_num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::request("grid", msg)
}

fn parse_f64(name: &str, token: &str) -> Result<f64, CliError> {
    token
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| bad(format!("`{name}`: cannot read `{token}` as a number")))
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let mut v: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    v[n - 1] = hi;
    v
}

enum Axis {
    Numeric(Vec<f64>),
    Labels(Vec<String>),
}

fn parse_axis(model: &FittedModel, name: &str, spec: &str) -> Result<Axis, CliError> {
    let levels = factor_levels(model, name);
    let spec = spec.trim();
    if let Some(levels) = levels {
        if spec == "*" {
            return Ok(Axis::Labels(levels));
        }
        let picked: Vec<String> = spec.split(',').map(|s| s.trim().to_string()).collect();
        if let Some(l) = picked.iter().find(|l| !levels.contains(l)) {
            return Err(bad(format!("unknown level `{l}` of factor `{name}`")));
        }
        return Ok(Axis::Labels(picked));
    }
    if spec == "*" {
        return Err(bad(format!("`{name}=*` needs a factor of the model")));
    }
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [lo, hi, n] => {
            let (lo, hi) = (parse_f64(name, lo)?, parse_f64(name, hi)?);
            let n: usize = n
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| bad(format!("`{name}`: point count `{n}` must be a positive integer")))?;
            Ok(Axis::Numeric(linspace(lo, hi, n)))
        }
        [single] => single
            .split(',')
            .map(|t| parse_f64(name, t))
            .collect::<Result<_, _>>()
            .map(Axis::Numeric),
        _ => Err(bad(format!("`{name}={spec}`: expected lo:hi:n, * or a value list"))),
    }
}

/// Parses the range syntax against a model (to tell factors from numbers).
pub fn parse_spec(model: &FittedModel, text: &str) -> Result<Table, CliError> {
    let mut factors = Vec::new();
    let mut numeric = Vec::new();
    for item in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, spec) = item
            .split_once('=')
            .ok_or_else(|| bad(format!("`{item}`: expected name=values")))?;
        let name = name.trim().to_string();
        if factors.iter().chain(numeric.iter()).any(|(n, _): &(String, Axis)| *n == name) {
            return Err(bad(format!("`{name}` is given twice")));
        }
        match parse_axis(model, &name, spec)? {
            a @ Axis::Labels(_) => factors.push((name, a)),
            a @ Axis::Numeric(_) => numeric.push((name, a)),
        }
    }
    let axes: Vec<(String, Axis)> = factors.into_iter().chain(numeric).collect();
    let sizes: Vec<usize> = axes
        .iter()
        .map(|(_, a)| match a {
            Axis::Numeric(v) => v.len(),
            Axis::Labels(v) => v.len(),
        })
        .collect();
    let total: usize = sizes.iter().product();
    let mut columns = Vec::with_capacity(axes.len());
    for (j, (name, axis)) in axes.iter().enumerate() {
        let inner: usize = sizes[j + 1..].iter().product();
        let idx = (0..total).map(|r| (r / inner) % sizes[j]);
        let col = match axis {
            Axis::Numeric(v) => GridColumn::Numeric(idx.map(|i| v[i]).collect()),
            Axis::Labels(v) => GridColumn::Labels(idx.map(|i| v[i].clone()).collect()),
        };
        columns.push((name.clone(), col));
    }
    Ok(Table { columns })
}

/// Reads a grid from CSV. Columns naming a model factor are read as labels,
/// everything else as numbers where possible.
pub fn read_csv(model: &FittedModel, path: &Path) -> Result<Table, CliError> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| CliError::input("io", format!("cannot read {}: {e}", path.display())))?;
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::input("csv", e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); names.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::input("csv", e.to_string()))?;
        for (j, v) in rec.iter().enumerate() {
            cells[j].push(v.trim().to_string());
        }
    }
    let columns = names
        .into_iter()
        .zip(cells)
        .map(|(name, vals)| {
            let numeric: Option<Vec<f64>> = if factor_levels(model, &name).is_some() {
                None
            } else {
                vals.iter().map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite())).collect()
            };
            let col = match numeric {
                Some(v) => GridColumn::Numeric(v),
                None => GridColumn::Labels(vals),
            };
            (name, col)
        })
        .collect();
    Ok(Table { columns })
}

/// A grid argument: an existing file path is read as CSV, anything else as
/// range syntax.
pub fn load(model: &FittedModel, arg: &str) -> Result<Table, CliError> {
    let p = Path::new(arg);
    if !arg.contains('=') && p.is_file() {
        read_csv(model, p)
    } else if !arg.contains('=') {
        Err(CliError::input("io", format!("grid file {arg} does not exist")))
    } else {
        parse_spec(model, arg)
    }
}
