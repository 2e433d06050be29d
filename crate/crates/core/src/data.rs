//! Typed tabular data: numeric covariates, factors with explicit level
//! ordering, observation weights and the response column.
//!
//! A [`Dataset`] is immutable once loaded. Missing values are rejected
//! rather than imputed.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at row {row}, column `{column}`: cannot read `{token}` as a finite number")]
    Parse {
        row: usize,
        column: String,
        token: String,
    },
    #[error("missing value at row {row}, column `{column}`")]
    Missing { row: usize, column: String },
    #[error("validation error: {0}")]
    Validation(String),
}

impl DataError {
    pub fn kind(&self) -> &'static str {
        match self {
            DataError::Io { .. } => "io",
            DataError::Csv(_) => "csv",
            DataError::Schema(_) => "schema",
            DataError::Parse { .. } => "parse",
            DataError::Missing { .. } => "missing",
            DataError::Validation(_) => "validation",
        }
    }
}

/// A categorical column: integer codes into an ordered list of labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    codes: Vec<usize>,
    levels: Vec<String>,
}

impl Factor {
    /// Encodes labels using first-appearance level order.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut levels: Vec<String> = Vec::new();
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut codes = Vec::with_capacity(labels.len());
        for label in labels {
            let label = label.as_ref();
            let code = match index.get(label) {
                Some(&c) => c,
                None => {
                    levels.push(label.to_string());
                    index.insert(label, levels.len() - 1);
                    levels.len() - 1
                }
            };
            codes.push(code);
        }
        Factor { codes, levels }
    }

    /// Encodes labels against an explicit level order. Labels outside the
    /// order are an error; declared levels that never occur are kept.
    pub fn with_levels<S: AsRef<str>>(labels: &[S], levels: &[String]) -> Result<Self, DataError> {
        let index: BTreeMap<&str, usize> = levels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        if index.len() != levels.len() {
            return Err(DataError::Schema("declared factor levels are not unique".into()));
        }
        let codes = labels
            .iter()
            .map(|l| {
                index.get(l.as_ref()).copied().ok_or_else(|| {
                    DataError::Validation(format!(
                        "label `{}` is not among the declared levels",
                        l.as_ref()
                    ))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Factor {
            codes,
            levels: levels.to_vec(),
        })
    }

    pub fn codes(&self) -> &[usize] {
        &self.codes
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn label(&self, row: usize) -> &str {
        &self.levels[self.codes[row]]
    }

    pub fn level_index(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Column {
    Numeric(Vec<f64>),
    Factor(Factor),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Factor(f) => f.codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_numeric(&self) -> Option<&[f64]> {
        match self {
            Column::Numeric(v) => Some(v),
            Column::Factor(_) => None,
        }
    }

    pub fn as_factor(&self) -> Option<&Factor> {
        match self {
            Column::Factor(f) => Some(f),
            Column::Numeric(_) => None,
        }
    }

    /// Text form of one cell, as written back to CSV.
    fn cell(&self, row: usize) -> String {
        match self {
            Column::Numeric(v) => format!("{}", v[row]),
            Column::Factor(f) => f.label(row).to_string(),
        }
    }
}

/// Column-kind declarations, typically read from a JSON sidecar:
///
/// ```json
/// {"response": "weight", "weight": "count", "factors": ["animal"],
///  "levels": {"animal": ["1", "2", "3"]}}
/// ```
///
/// When `numeric` is absent every non-factor column is parsed as numeric.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<String>,
    #[serde(default)]
    pub factors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numeric: Option<Vec<String>>,
    #[serde(default)]
    pub levels: BTreeMap<String, Vec<String>>,
}

impl Schema {
    pub fn new(response: impl Into<String>) -> Self {
        Schema {
            response: response.into(),
            ..Default::default()
        }
    }

    pub fn weight(mut self, name: impl Into<String>) -> Self {
        self.weight = Some(name.into());
        self
    }

    pub fn factor(mut self, name: impl Into<String>) -> Self {
        self.factors.push(name.into());
        self
    }

    pub fn factor_levels(mut self, name: impl Into<String>, levels: &[&str]) -> Self {
        let name = name.into();
        if !self.factors.contains(&name) {
            self.factors.push(name.clone());
        }
        self.levels
            .insert(name, levels.iter().map(|s| s.to_string()).collect());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Column>,
    n_rows: usize,
    response: String,
    weight: Option<String>,
}

impl Dataset {
    /// Builds a dataset from already-typed columns and validates it.
    pub fn new(
        columns: Vec<(String, Column)>,
        response: impl Into<String>,
        weight: Option<String>,
    ) -> Result<Self, DataError> {
        let response = response.into();
        let n_rows = columns.first().map(|(_, c)| c.len()).unwrap_or(0);
        let (names, columns): (Vec<_>, Vec<_>) = columns.into_iter().unzip();
        let ds = Dataset {
            names,
            columns,
            n_rows,
            response,
            weight,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<(), DataError> {
        for (i, name) in self.names.iter().enumerate() {
            if self.names[..i].contains(name) {
                return Err(DataError::Schema(format!("duplicate column `{name}`")));
            }
            if self.columns[i].len() != self.n_rows {
                return Err(DataError::Validation(format!(
                    "column `{name}` has {} entries, expected {}",
                    self.columns[i].len(),
                    self.n_rows
                )));
            }
            if let Column::Numeric(v) = &self.columns[i] {
                if let Some(row) = v.iter().position(|x| !x.is_finite()) {
                    return Err(DataError::Validation(format!(
                        "non-finite value in column `{name}` at row {}",
                        row + 1
                    )));
                }
            }
        }
        match self.column(&self.response) {
            None => {
                return Err(DataError::Schema(format!(
                    "response column `{}` not found",
                    self.response
                )))
            }
            Some(Column::Factor(_)) => {
                return Err(DataError::Schema(format!(
                    "response column `{}` must be numeric",
                    self.response
                )))
            }
            Some(Column::Numeric(_)) => {}
        }
        if let Some(w) = &self.weight {
            match self.column(w) {
                None => return Err(DataError::Schema(format!("weight column `{w}` not found"))),
                Some(Column::Factor(_)) => {
                    return Err(DataError::Schema(format!("weight column `{w}` must be numeric")))
                }
                Some(Column::Numeric(v)) => {
                    if let Some(row) = v.iter().position(|&x| !(x > 0.0)) {
                        return Err(DataError::Validation(format!(
                            "weight column `{w}` has non-positive value {} at row {}",
                            v[row],
                            row + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Loads and validates a CSV file.
    pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Self, DataError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::read_csv(file, schema)
    }

    pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| DataError::Csv(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
            return Err(DataError::Csv("header row is empty".into()));
        }

        let mut declared: Vec<&String> = vec![&schema.response];
        declared.extend(schema.weight.iter());
        declared.extend(schema.factors.iter());
        if let Some(numeric) = &schema.numeric {
            declared.extend(numeric.iter());
        }
        for name in declared {
            if !headers.contains(name) {
                return Err(DataError::Schema(format!("declared column `{name}` not in header")));
            }
        }
        for name in schema.levels.keys() {
            if !schema.factors.contains(name) {
                return Err(DataError::Schema(format!(
                    "levels declared for `{name}`, which is not a factor column"
                )));
            }
        }

        let keep: Vec<bool> = headers
            .iter()
            .map(|h| match &schema.numeric {
                None => true,
                Some(numeric) => {
                    numeric.contains(h)
                        || schema.factors.contains(h)
                        || &schema.response == h
                        || schema.weight.as_ref() == Some(h)
                }
            })
            .collect();

        let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
        for (row, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
            if record.len() != headers.len() {
                return Err(DataError::Csv(format!(
                    "row {} has {} fields, header has {}",
                    row + 1,
                    record.len(),
                    headers.len()
                )));
            }
            for (j, field) in record.iter().enumerate() {
                if !keep[j] {
                    continue;
                }
                if field.is_empty() || field == "NA" {
                    return Err(DataError::Missing {
                        row: row + 1,
                        column: headers[j].clone(),
                    });
                }
                raw[j].push(field.to_string());
            }
        }

        let mut columns = Vec::new();
        for (j, name) in headers.iter().enumerate() {
            if !keep[j] {
                continue;
            }
            let cells = std::mem::take(&mut raw[j]);
            let column = if schema.factors.contains(name) {
                match schema.levels.get(name) {
                    Some(levels) => Column::Factor(Factor::with_levels(&cells, levels)?),
                    None => Column::Factor(Factor::from_labels(&cells)),
                }
            } else {
                let values = cells
                    .iter()
                    .enumerate()
                    .map(|(row, tok)| match tok.parse::<f64>() {
                        Ok(v) if v.is_finite() => Ok(v),
                        _ => Err(DataError::Parse {
                            row: row + 1,
                            column: name.clone(),
                            token: tok.clone(),
                        }),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Column::Numeric(values)
            };
            columns.push((name.clone(), column));
        }
        Dataset::new(columns, schema.response.clone(), schema.weight.clone())
    }

    /// Writes the dataset as CSV. Numbers use the shortest representation
    /// that round-trips exactly.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| DataError::Csv(e.to_string());
        wtr.write_record(&self.names).map_err(csv_err)?;
        for row in 0..self.n_rows {
            let record: Vec<String> = self.columns.iter().map(|c| c.cell(row)).collect();
            wtr.write_record(&record).map_err(csv_err)?;
        }
        wtr.flush().map_err(|e| DataError::Csv(e.to_string()))?;
        Ok(())
    }

    /// The schema that reproduces this dataset's column kinds and level order.
    pub fn schema(&self) -> Schema {
        let mut schema = Schema::new(self.response.clone());
        schema.weight = self.weight.clone();
        for (name, col) in self.names.iter().zip(&self.columns) {
            if let Column::Factor(f) = col {
                schema.factors.push(name.clone());
                schema.levels.insert(name.clone(), f.levels.clone());
            }
        }
        schema
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn response_name(&self) -> &str {
        &self.response
    }

    pub fn weight_name(&self) -> Option<&str> {
        self.weight.as_deref()
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.columns[i])
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64], DataError> {
        match self.column(name) {
            Some(Column::Numeric(v)) => Ok(v),
            Some(Column::Factor(_)) => Err(DataError::Schema(format!(
                "column `{name}` is a factor, expected numeric"
            ))),
            None => Err(DataError::Schema(format!("column `{name}` not found"))),
        }
    }

    pub fn factor(&self, name: &str) -> Result<&Factor, DataError> {
        match self.column(name) {
            Some(Column::Factor(f)) => Ok(f),
            Some(Column::Numeric(_)) => Err(DataError::Schema(format!(
                "column `{name}` is numeric, expected a factor"
            ))),
            None => Err(DataError::Schema(format!("column `{name}` not found"))),
        }
    }

    pub fn response(&self) -> &[f64] {
        self.numeric(&self.response)
            .expect("response validated at construction")
    }

    /// Prior weights; all ones when no weight column was declared.
    pub fn weights(&self) -> Vec<f64> {
        match &self.weight {
            Some(w) => self.numeric(w).expect("weights validated").to_vec(),
            None => vec![1.0; self.n_rows],
        }
    }

    /// Stable content fingerprint (FNV-1a over the canonical CSV bytes).
    pub fn fingerprint(&self) -> u64 {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for b in buf {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        hash
    }
}
