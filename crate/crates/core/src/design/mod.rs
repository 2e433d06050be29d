//! Model formulas and their compilation into a design matrix plus a list of
//! penalty blocks.

mod formula;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use formula::{parse_formula, Formula, TermKind, TermSpec, Transform, DEFAULT_K};

use crate::basis::{
    absorb_constraint, bspline_basis, bspline_penalty, tprs_basis, BasisError, BasisKind, BasisMatrix,
    ConstraintTransform, PenaltyMatrix, SmoothBasis,
};
use crate::data::{Column, Dataset};
use crate::linalg::{serde_dmatrix, svd_null_space, sym_eigen_desc};

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("formula parse error at position {pos}: {message}")]
    Parse { pos: usize, message: String },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{column}` used by `{term}` must be {expected}")]
    ColumnType {
        term: String,
        column: String,
        expected: &'static str,
    },
    #[error("term `{term}`: {source}")]
    Basis {
        term: String,
        #[source]
        source: BasisError,
    },
    #[error("term `{term}` needs a factor with at least 2 levels; `{factor}` has {n}")]
    Levels { term: String, factor: String, n: usize },
    #[error("unknown level `{level}` of factor `{factor}`")]
    UnknownLevel { factor: String, level: String },
    #[error("grid is missing column `{0}`")]
    MissingGridColumn(String),
    #[error("{0}")]
    Invalid(String),
}

impl SpecError {
    pub fn kind(&self) -> &'static str {
        match self {
            SpecError::Parse { .. } => "parse",
            SpecError::UnknownColumn(_) => "unknown_column",
            SpecError::ColumnType { .. } => "column_type",
            SpecError::Basis { source, .. } => match source {
                BasisError::Dimension(_) => "basis_dimension",
                BasisError::Extrapolation { .. } => "extrapolation",
                _ => "basis",
            },
            SpecError::Levels { .. } => "levels",
            SpecError::UnknownLevel { .. } => "unknown_level",
            SpecError::MissingGridColumn(_) => "missing_column",
            SpecError::Invalid(_) => "invalid",
        }
    }
}

/// A penalty `block` repeated `repeats` times along the diagonal starting at
/// column `offset`, multiplied by smoothing parameter number `group`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyBlock {
    pub term: usize,
    pub offset: usize,
    #[serde(with = "serde_dmatrix")]
    pub block: DMatrix<f64>,
    pub repeats: usize,
    pub group: usize,
    /// Rank of one copy of `block`.
    pub rank: usize,
}

impl PenaltyBlock {
    pub fn width(&self) -> usize {
        self.block.nrows() * self.repeats
    }

    pub fn total_rank(&self) -> usize {
        self.rank * self.repeats
    }

    /// Adds `scale` times this penalty to `target` (P × P).
    pub fn add_to(&self, target: &mut DMatrix<f64>, scale: f64) {
        let b = self.block.nrows();
        for r in 0..self.repeats {
            let o = self.offset + r * b;
            for i in 0..b {
                for j in 0..b {
                    target[(o + i, o + j)] += scale * self.block[(i, j)];
                }
            }
        }
    }

    /// βᵀSβ for this penalty alone.
    pub fn quad(&self, beta: &[f64]) -> f64 {
        let b = self.block.nrows();
        let mut total = 0.0;
        for r in 0..self.repeats {
            let o = self.offset + r * b;
            for i in 0..b {
                for j in 0..b {
                    total += beta[o + i] * self.block[(i, j)] * beta[o + j];
                }
            }
        }
        total
    }
}

/// Everything needed to rebuild a term's columns at new covariate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermDesign {
    pub spec: TermSpec,
    /// Column range `start..end` in the full design.
    pub start: usize,
    pub end: usize,
    /// Per-level basis dimension before any constraint.
    pub k_basis: usize,
    /// Number of unpenalized columns the term contributes.
    pub null_dim: usize,
    /// Level labels of each factor the term uses.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smooth: Option<SmoothBasis>,
    /// One transform for `s` and `sz`, one per level for by-smooths.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<ConstraintTransform>,
    /// `sz` only: orthonormal map from the free coefficients to the
    /// combined levels (n_combined × n_free).
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_dmatrix")]
    pub level_map: Option<DMatrix<f64>>,
}

impl TermDesign {
    pub fn label(&self) -> &str {
        &self.spec.label
    }

    pub fn kind(&self) -> TermKind {
        self.spec.kind
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    /// Index of each row's combined level across the term's factors.
    fn combined_codes(&self, codes: &[Vec<usize>]) -> Vec<usize> {
        let n = codes.first().map(Vec::len).unwrap_or(0);
        (0..n)
            .map(|i| {
                let mut c = 0;
                for (f, lv) in codes.iter().zip(&self.levels) {
                    c = c * lv.len() + f[i];
                }
                c
            })
            .collect()
    }

    /// The term's columns for the given covariate values and level codes.
    fn columns(&self, x: Option<&[f64]>, codes: &[Vec<usize>], n: usize, clamp: bool) -> Result<DMatrix<f64>, SpecError> {
        let w = self.width();
        let mut out = DMatrix::zeros(n, w);
        let basis = |x: &[f64]| -> Result<DMatrix<f64>, SpecError> {
            let sb = self.smooth.as_ref().expect("smooth term without basis");
            sb.evaluate(x, clamp).map_err(|source| SpecError::Basis {
                term: self.spec.label.clone(),
                source,
            })
        };
        match self.spec.kind {
            TermKind::Intercept => out.fill(1.0),
            TermKind::Linear => {
                let x = x.expect("linear term without covariate");
                for i in 0..n {
                    out[(i, 0)] = match self.spec.transform {
                        Some(t) => t.apply(x[i]),
                        None => x[i],
                    };
                }
                if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
                    return Err(SpecError::Invalid(format!(
                        "term `{}` produced non-finite value {bad}",
                        self.spec.label
                    )));
                }
            }
            TermKind::Factor => {
                for (i, &c) in codes[0].iter().enumerate() {
                    if c > 0 {
                        out[(i, c - 1)] = 1.0;
                    }
                }
            }
            TermKind::RandomIntercept => {
                for (i, &c) in codes[0].iter().enumerate() {
                    out[(i, c)] = 1.0;
                }
            }
            TermKind::Smooth => {
                let b = basis(x.unwrap())?;
                out.copy_from(&(b * &self.constraints[0].z));
            }
            TermKind::BySmooth => {
                let b = basis(x.unwrap())?;
                let mut o = 0;
                for (lvl, z) in self.constraints.iter().enumerate() {
                    let kz = z.z.ncols();
                    for i in 0..n {
                        if codes[0][i] == lvl {
                            let row = b.row(i) * &z.z;
                            out.view_mut((i, o), (1, kz)).copy_from(&row);
                        }
                    }
                    o += kz;
                }
            }
            TermKind::RandomSmooth => {
                let b = basis(x.unwrap())?;
                let k = self.k_basis;
                for i in 0..n {
                    let o = codes[0][i] * k;
                    out.view_mut((i, o), (1, k)).copy_from(&b.row(i));
                }
            }
            TermKind::FsInteraction => {
                let b = basis(x.unwrap())? * &self.constraints[0].z;
                let k = b.ncols();
                let map = self.level_map.as_ref().expect("sz term without level map");
                let comb = self.combined_codes(codes);
                for i in 0..n {
                    for m in 0..map.ncols() {
                        let a = map[(comb[i], m)];
                        if a != 0.0 {
                            for j in 0..k {
                                out[(i, m * k + j)] = a * b[(i, j)];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

mod opt_dmatrix {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "crate::linalg::serde_dmatrix")] DMatrix<f64>);

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(|m| Wrap(m.clone())).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

/// The data-independent part of a compiled model: term layout, basis
/// artifacts and penalties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub formula: Formula,
    pub terms: Vec<TermDesign>,
    pub penalties: Vec<PenaltyBlock>,
    /// Label of each smoothing parameter.
    pub groups: Vec<String>,
    pub n_coef: usize,
}

impl Design {
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn term_index(&self, label: &str) -> Option<usize> {
        self.terms.iter().position(|t| t.spec.label == label)
    }

    /// Σ_j λ_j S_j as a dense P × P matrix.
    pub fn total_penalty(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.n_coef, self.n_coef);
        for p in &self.penalties {
            p.add_to(&mut s, lambdas[p.group]);
        }
        s
    }

    /// Columns left unpenalized by every smoothing parameter.
    pub fn null_space_dim(&self) -> usize {
        self.terms.iter().map(|t| t.null_dim).sum()
    }

    /// Number of columns of parametric (never penalized) terms.
    pub fn parametric_cols(&self) -> usize {
        self.terms.iter().filter(|t| !t.spec.is_penalized()).map(|t| t.width()).sum()
    }

    /// Every data column a non-excluded term reads.
    pub fn required_columns(&self, exclude: &[usize]) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (i, t) in self.terms.iter().enumerate() {
            if exclude.contains(&i) {
                continue;
            }
            for c in t.spec.columns() {
                if !out.iter().any(|o| o == c) {
                    out.push(c.to_string());
                }
            }
        }
        out
    }

    /// Prediction matrix at new covariate values. Excluded terms get zero
    /// columns and their covariates need not be supplied. Points outside a
    /// smooth's training range are an error unless `clamp` is set.
    pub fn predict_matrix(&self, grid: &Grid, exclude: &[usize], clamp: bool) -> Result<DMatrix<f64>, SpecError> {
        let n = grid.n_rows();
        let mut x = DMatrix::zeros(n, self.n_coef);
        for (ti, t) in self.terms.iter().enumerate() {
            if exclude.contains(&ti) {
                continue;
            }
            let cov = match &t.spec.covariate {
                Some(c) if t.spec.kind != TermKind::Factor => Some(grid.numeric(c)?),
                _ => None,
            };
            let mut codes = Vec::new();
            let factor_names: Vec<&String> = if t.spec.kind == TermKind::Factor {
                t.spec.covariate.iter().collect()
            } else {
                t.spec.factors.iter().collect()
            };
            for (f, levels) in factor_names.iter().zip(&t.levels) {
                codes.push(grid.codes(f, levels)?);
            }
            let cols = t.columns(cov, &codes, n, clamp)?;
            x.view_mut((0, t.start), (n, t.width())).copy_from(&cols);
        }
        Ok(x)
    }
}

/// Covariate values for prediction, with factors given by level label.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grid {
    columns: BTreeMap<String, GridColumn>,
    n_rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridColumn {
    Numeric(Vec<f64>),
    Labels(Vec<String>),
}

impl GridColumn {
    fn len(&self) -> usize {
        match self {
            GridColumn::Numeric(v) => v.len(),
            GridColumn::Labels(v) => v.len(),
        }
    }
}

impl Grid {
    pub fn new(columns: Vec<(String, GridColumn)>) -> Result<Self, SpecError> {
        let n_rows = columns.first().map(|(_, c)| c.len()).unwrap_or(0);
        let mut map = BTreeMap::new();
        for (name, col) in columns {
            if col.len() != n_rows {
                return Err(SpecError::Invalid(format!(
                    "grid column `{name}` has {} rows, expected {n_rows}",
                    col.len()
                )));
            }
            if map.insert(name.clone(), col).is_some() {
                return Err(SpecError::Invalid(format!("duplicate grid column `{name}`")));
            }
        }
        Ok(Grid { columns: map, n_rows })
    }

    pub fn from_dataset(data: &Dataset) -> Self {
        let mut columns = BTreeMap::new();
        for name in data.names() {
            let col = match data.column(name).unwrap() {
                Column::Numeric(v) => GridColumn::Numeric(v.clone()),
                Column::Factor(f) => GridColumn::Labels((0..f.codes().len()).map(|i| f.label(i).to_string()).collect()),
            };
            columns.insert(name.clone(), col);
        }
        Grid {
            columns,
            n_rows: data.n_rows(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.columns.keys()
    }

    pub fn column(&self, name: &str) -> Option<&GridColumn> {
        self.columns.get(name)
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64], SpecError> {
        match self.columns.get(name) {
            Some(GridColumn::Numeric(v)) => Ok(v),
            Some(GridColumn::Labels(_)) => Err(SpecError::Invalid(format!("grid column `{name}` must be numeric"))),
            None => Err(SpecError::MissingGridColumn(name.to_string())),
        }
    }

    /// Level codes of a factor column against the training levels. Numeric
    /// grid values are matched by their display form.
    pub fn codes(&self, name: &str, levels: &[String]) -> Result<Vec<usize>, SpecError> {
        let labels: Vec<String> = match self.columns.get(name) {
            Some(GridColumn::Labels(v)) => v.clone(),
            Some(GridColumn::Numeric(v)) => v.iter().map(|x| x.to_string()).collect(),
            None => return Err(SpecError::MissingGridColumn(name.to_string())),
        };
        labels
            .iter()
            .map(|l| {
                levels.iter().position(|lv| lv == l).ok_or_else(|| SpecError::UnknownLevel {
                    factor: name.to_string(),
                    level: l.clone(),
                })
            })
            .collect()
    }

    /// Replaces or adds a column.
    pub fn set(&mut self, name: impl Into<String>, col: GridColumn) -> Result<(), SpecError> {
        if !self.columns.is_empty() && col.len() != self.n_rows {
            return Err(SpecError::Invalid("grid column length mismatch".into()));
        }
        self.n_rows = col.len();
        self.columns.insert(name.into(), col);
        Ok(())
    }
}

/// A compiled model: the design matrix for the training data plus the
/// reusable [`Design`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMatrices {
    pub x: DMatrix<f64>,
    pub design: Design,
}

/// Compiles a formula against a dataset.
pub fn assemble_design(formula: &Formula, data: &Dataset) -> Result<ModelMatrices, SpecError> {
    if data.column(&formula.response).is_none() {
        return Err(SpecError::UnknownColumn(formula.response.clone()));
    }
    if formula.response != data.response_name() {
        return Err(SpecError::Invalid(format!(
            "formula response `{}` differs from the dataset response `{}`",
            formula.response,
            data.response_name()
        )));
    }
    let n = data.n_rows();
    let mut terms: Vec<TermDesign> = Vec::new();
    let mut blocks: Vec<DMatrix<f64>> = Vec::new();
    let mut penalties: Vec<PenaltyBlock> = Vec::new();
    let mut groups: Vec<String> = Vec::new();
    let mut offset = 0;

    for (ti, spec) in formula.terms.iter().enumerate() {
        for c in spec.columns() {
            if data.column(c).is_none() {
                return Err(SpecError::UnknownColumn(c.to_string()));
            }
            if c == formula.response {
                return Err(SpecError::Invalid(format!("response `{c}` used as a predictor")));
            }
        }
        let mut spec = spec.clone();
        if spec.kind == TermKind::Linear {
            if let Some(Column::Factor(_)) = data.column(spec.covariate.as_ref().unwrap()) {
                if spec.transform.is_some() {
                    return Err(SpecError::ColumnType {
                        term: spec.label.clone(),
                        column: spec.covariate.clone().unwrap(),
                        expected: "numeric",
                    });
                }
                spec.kind = TermKind::Factor;
            }
        }
        let (td, cols, pens) = build_term(&spec, data, ti, offset, &mut groups)?;
        offset += cols.ncols();
        penalties.extend(pens);
        blocks.push(cols);
        terms.push(td);
    }

    let mut x = DMatrix::zeros(n, offset);
    for (t, b) in terms.iter().zip(&blocks) {
        x.view_mut((0, t.start), (n, t.width())).copy_from(b);
    }
    for p in penalties.iter_mut() {
        scale_penalty(p, &x);
    }
    Ok(ModelMatrices {
        x,
        design: Design {
            formula: formula.clone(),
            terms,
            penalties,
            groups,
            n_coef: offset,
        },
    })
}

/// Rescales a penalty so that its Frobenius norm matches that of XᵀX over
/// the columns it covers. This keeps log λ on a comparable scale across
/// terms without changing the fitted model.
fn scale_penalty(p: &mut PenaltyBlock, x: &DMatrix<f64>) {
    let cols = x.columns(p.offset, p.width());
    let xtx_norm = (cols.transpose() * cols).norm();
    let s_norm = p.block.norm() * (p.repeats as f64).sqrt();
    if s_norm > 0.0 && xtx_norm > 0.0 {
        p.block *= xtx_norm / s_norm;
    }
}

fn basis_err(term: &TermSpec) -> impl Fn(BasisError) -> SpecError + '_ {
    move |source| SpecError::Basis {
        term: term.label.clone(),
        source,
    }
}

/// Unconstrained basis and penalty of dimension `k` for a smooth term.
fn raw_smooth(
    spec: &TermSpec,
    x: &[f64],
    k: usize,
) -> Result<(BasisMatrix, PenaltyMatrix, SmoothBasis), SpecError> {
    let b = spec.basis.as_ref().expect("smooth term without basis spec");
    let mut bs = b.clone();
    bs.k = k;
    let err = basis_err(spec);
    match bs.kind {
        BasisKind::Bspline => {
            let bm = bspline_basis(x, &bs).map_err(&err)?;
            let s = bspline_penalty(&bm.spec).map_err(&err)?;
            let sb = SmoothBasis::Bspline {
                knots: bm.spec.knots.clone().unwrap(),
                degree: bm.spec.degree,
            };
            Ok((bm, s, sb))
        }
        BasisKind::Tprs => {
            let (bm, s, t) = tprs_basis(x, &bs).map_err(&err)?;
            Ok((bm, s, SmoothBasis::Tprs(t)))
        }
        BasisKind::RandomIntercept => Err(SpecError::Invalid("random-intercept basis in a smooth".into())),
    }
}

fn factor_of<'a>(
    data: &'a Dataset,
    spec: &TermSpec,
    name: &str,
    min_levels: usize,
) -> Result<&'a crate::data::Factor, SpecError> {
    let f = data.factor(name).map_err(|_| SpecError::ColumnType {
        term: spec.label.clone(),
        column: name.to_string(),
        expected: "a factor",
    })?;
    if f.n_levels() < min_levels {
        return Err(SpecError::Levels {
            term: spec.label.clone(),
            factor: name.to_string(),
            n: f.n_levels(),
        });
    }
    Ok(f)
}

fn numeric_of<'a>(data: &'a Dataset, spec: &TermSpec) -> Result<&'a [f64], SpecError> {
    let name = spec.covariate.as_ref().unwrap();
    data.numeric(name).map_err(|_| SpecError::ColumnType {
        term: spec.label.clone(),
        column: name.clone(),
        expected: "numeric",
    })
}

fn new_group(groups: &mut Vec<String>, label: String) -> usize {
    groups.push(label);
    groups.len() - 1
}

type BuiltTerm = (TermDesign, DMatrix<f64>, Vec<PenaltyBlock>);

fn build_term(
    spec: &TermSpec,
    data: &Dataset,
    ti: usize,
    offset: usize,
    groups: &mut Vec<String>,
) -> Result<BuiltTerm, SpecError> {
    let n = data.n_rows();
    let mut td = TermDesign {
        spec: spec.clone(),
        start: offset,
        end: offset,
        k_basis: 0,
        null_dim: 0,
        levels: Vec::new(),
        smooth: None,
        constraints: Vec::new(),
        level_map: None,
    };
    let mut pens = Vec::new();
    let mut codes: Vec<Vec<usize>> = Vec::new();
    let mut x: Option<&[f64]> = None;
    let width;
    match spec.kind {
        TermKind::Intercept => {
            width = 1;
            td.null_dim = 1;
        }
        TermKind::Linear => {
            x = Some(numeric_of(data, spec)?);
            width = 1;
            td.null_dim = 1;
        }
        TermKind::Factor => {
            let f = factor_of(data, spec, spec.covariate.as_ref().unwrap(), 1)?;
            td.levels.push(f.levels().to_vec());
            codes.push(f.codes().to_vec());
            width = f.n_levels() - 1;
            td.null_dim = width;
        }
        TermKind::RandomIntercept => {
            let f = factor_of(data, spec, &spec.factors[0], 1)?;
            td.levels.push(f.levels().to_vec());
            codes.push(f.codes().to_vec());
            width = f.n_levels();
            td.k_basis = width;
            let g = new_group(groups, spec.label.clone());
            pens.push(PenaltyBlock {
                term: ti,
                offset,
                block: DMatrix::identity(1, 1),
                repeats: width,
                group: g,
                rank: 1,
            });
        }
        TermKind::Smooth => {
            let xv = numeric_of(data, spec)?;
            x = Some(xv);
            let k = spec.basis.as_ref().unwrap().k;
            let (bm, s, sb) = raw_smooth(spec, xv, k + 1)?;
            let (_, st, z) = absorb_constraint(&bm, &s).map_err(basis_err(spec))?;
            td.k_basis = k + 1;
            td.smooth = Some(sb);
            width = z.z.ncols();
            td.null_dim = width - st.rank;
            td.constraints.push(z);
            let g = new_group(groups, spec.label.clone());
            pens.push(PenaltyBlock {
                term: ti,
                offset,
                block: st.values,
                repeats: 1,
                group: g,
                rank: st.rank,
            });
        }
        TermKind::BySmooth => {
            let xv = numeric_of(data, spec)?;
            x = Some(xv);
            let f = factor_of(data, spec, &spec.factors[0], 2)?;
            td.levels.push(f.levels().to_vec());
            codes.push(f.codes().to_vec());
            let k = spec.basis.as_ref().unwrap().k;
            let (bm, s, sb) = raw_smooth(spec, xv, k + 1)?;
            td.k_basis = k + 1;
            td.smooth = Some(sb);
            let mut o = offset;
            for (lvl, name) in f.levels().iter().enumerate() {
                let rows: Vec<usize> = (0..n).filter(|&i| f.codes()[i] == lvl).collect();
                let sub = BasisMatrix {
                    values: bm.values.select_rows(&rows),
                    spec: bm.spec.clone(),
                };
                let (_, st, z) = absorb_constraint(&sub, &s).map_err(basis_err(spec))?;
                let kz = z.z.ncols();
                td.null_dim += kz - st.rank;
                let g = new_group(groups, format!("{}[{name}]", spec.label));
                pens.push(PenaltyBlock {
                    term: ti,
                    offset: o,
                    block: st.values,
                    repeats: 1,
                    group: g,
                    rank: st.rank,
                });
                o += kz;
                td.constraints.push(z);
            }
            width = o - offset;
        }
        TermKind::RandomSmooth => {
            let xv = numeric_of(data, spec)?;
            x = Some(xv);
            let f = factor_of(data, spec, &spec.factors[0], 2)?;
            td.levels.push(f.levels().to_vec());
            codes.push(f.codes().to_vec());
            let k = spec.basis.as_ref().unwrap().k;
            let (_, s, sb) = raw_smooth(spec, xv, k)?;
            td.k_basis = k;
            td.smooth = Some(sb);
            let l = f.n_levels();
            width = k * l;
            // Ridge on the penalty null space so each level's curve,
            // constant and slope included, shrinks towards zero.
            let (_, vecs) = sym_eigen_desc(&s.values);
            let u0 = vecs.columns(s.rank, k - s.rank).clone_owned();
            let ridge = &u0 * u0.transpose();
            let g1 = new_group(groups, spec.label.clone());
            let g2 = new_group(groups, format!("{}:null", spec.label));
            pens.push(PenaltyBlock {
                term: ti,
                offset,
                block: s.values.clone(),
                repeats: l,
                group: g1,
                rank: s.rank,
            });
            pens.push(PenaltyBlock {
                term: ti,
                offset,
                block: ridge,
                repeats: l,
                group: g2,
                rank: k - s.rank,
            });
        }
        TermKind::FsInteraction => {
            let xv = numeric_of(data, spec)?;
            x = Some(xv);
            let mut sizes = Vec::new();
            for name in &spec.factors {
                let f = factor_of(data, spec, name, 2)?;
                td.levels.push(f.levels().to_vec());
                codes.push(f.codes().to_vec());
                sizes.push(f.n_levels());
            }
            let k = spec.basis.as_ref().unwrap().k;
            let (bm, s, sb) = raw_smooth(spec, xv, k + 1)?;
            let (_, st, z) = absorb_constraint(&bm, &s).map_err(basis_err(spec))?;
            td.k_basis = k + 1;
            td.smooth = Some(sb);
            let kz = z.z.ncols();
            td.constraints.push(z);
            let map = level_sum_null_space(&sizes);
            let m = map.ncols();
            if m == 0 {
                return Err(SpecError::Invalid(format!("term `{}` has no free coefficients", spec.label)));
            }
            td.level_map = Some(map);
            width = m * kz;
            td.null_dim = m * (kz - st.rank);
            let g = new_group(groups, spec.label.clone());
            pens.push(PenaltyBlock {
                term: ti,
                offset,
                block: st.values,
                repeats: m,
                group: g,
                rank: st.rank,
            });
        }
    }
    td.end = offset + width;
    let cols = td.columns(x, &codes, n, false)?;
    Ok((td, cols, pens))
}

/// Orthonormal basis for coefficient vectors over the combined levels of
/// the given factors whose sums over every factor margin vanish. For one
/// factor with L levels this is the (L − 1)-dimensional sum-to-zero space.
fn level_sum_null_space(sizes: &[usize]) -> DMatrix<f64> {
    let total: usize = sizes.iter().product();
    // Combined index c = ((i_0 * n_1) + i_1) * n_2 + ...
    let digits = |mut c: usize| -> Vec<usize> {
        let mut d = vec![0; sizes.len()];
        for f in (0..sizes.len()).rev() {
            d[f] = c % sizes[f];
            c /= sizes[f];
        }
        d
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for f in 0..sizes.len() {
        // For factor f and every setting of the other factors, the sum over
        // f's levels is zero.
        let others: usize = total / sizes[f];
        for o in 0..others {
            let mut row = vec![0.0; total];
            let mut rem = o;
            let mut fixed = vec![0; sizes.len()];
            for g in (0..sizes.len()).rev() {
                if g == f {
                    continue;
                }
                fixed[g] = rem % sizes[g];
                rem /= sizes[g];
            }
            for (c, r) in row.iter_mut().enumerate() {
                let d = digits(c);
                if (0..sizes.len()).all(|g| g == f || d[g] == fixed[g]) {
                    *r = 1.0;
                }
            }
            rows.push(row);
        }
    }
    let c = DMatrix::from_fn(rows.len(), total, |i, j| rows[i][j]);
    let (basis, _) = svd_null_space(&c, 1e-10);
    basis
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Factor;

    fn grouped(n_per: usize, levels: &[&str]) -> Dataset {
        let mut day = Vec::new();
        let mut g = Vec::new();
        let mut y = Vec::new();
        for (li, l) in levels.iter().enumerate() {
            for i in 0..n_per {
                let d = i as f64;
                day.push(d);
                g.push(l.to_string());
                y.push((d / 5.0).sin() + li as f64);
            }
        }
        Dataset::new(
            vec![
                ("y".into(), Column::Numeric(y)),
                ("day".into(), Column::Numeric(day)),
                ("g".into(), Column::Factor(Factor::from_labels(&g))),
            ],
            "y",
            None,
        )
        .unwrap()
    }

    #[test]
    fn intercept_only() {
        let d = grouped(5, &["a", "b"]);
        let m = assemble_design(&parse_formula("y ~ 1").unwrap(), &d).unwrap();
        assert_eq!(m.x.shape(), (10, 1));
        assert!(m.x.iter().all(|&v| v == 1.0));
        assert!(m.design.penalties.is_empty());
    }

    #[test]
    fn sz_removes_one_column_per_basis_function() {
        let d = grouped(30, &["CO", "T1", "T2", "T3"]);
        let m = assemble_design(&parse_formula("y ~ 1 + s(day, k=9) + sz(day, g, k=9)").unwrap(), &d).unwrap();
        let t = &m.design.terms[2];
        assert_eq!(t.width(), 4 * 9 - 9);
        assert_eq!(m.design.n_groups(), 2);
        // Summed over levels, every sz column contribution vanishes.
        let map = t.level_map.as_ref().unwrap();
        for j in 0..map.ncols() {
            assert!(map.column(j).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn two_factor_sz_counts() {
        assert_eq!(level_sum_null_space(&[4, 2]).ncols(), 3);
        assert_eq!(level_sum_null_space(&[3, 3]).ncols(), 4);
        let z = level_sum_null_space(&[4, 2]);
        assert!((z.transpose() * &z - DMatrix::identity(3, 3)).norm() < 1e-10);
    }

    #[test]
    fn random_smooth_has_two_shared_groups() {
        let d = grouped(20, &["e1", "e2", "e3"]);
        let m = assemble_design(&parse_formula("y ~ 1 + fs(day, g, k=6)").unwrap(), &d).unwrap();
        assert_eq!(m.design.n_groups(), 2);
        assert_eq!(m.design.penalties.len(), 2);
        assert!(m.design.penalties.iter().all(|p| p.repeats == 3));
        assert_eq!(m.design.terms[1].width(), 18);
        // Wiggly + ridge is full rank on each level.
        let s = m.design.total_penalty(&[1.0, 1.0]);
        let (v, _) = sym_eigen_desc(&s.view((1, 1), (18, 18)).clone_owned());
        assert!(v[17] > 1e-10 * v[0]);
    }

    #[test]
    fn by_smooth_has_one_group_per_level() {
        let d = grouped(20, &["a", "b", "c"]);
        let m = assemble_design(&parse_formula("y ~ 1 + g + s(day, by=g, k=5)").unwrap(), &d).unwrap();
        assert_eq!(m.design.terms[1].kind(), TermKind::Factor);
        assert_eq!(m.design.terms[1].width(), 2);
        assert_eq!(m.design.terms[2].width(), 15);
        assert_eq!(m.design.n_groups(), 3);
        // Level-a block is zero outside level-a rows and centred within it.
        for j in 0..5 {
            let c = m.x.column(3 + j);
            assert!(c.rows(20, 40).iter().all(|&v| v == 0.0));
            assert!(c.rows(0, 20).sum().abs() < 1e-9);
        }
    }

    #[test]
    fn column_ranges_partition() {
        let d = grouped(25, &["a", "b", "c"]);
        let m = assemble_design(
            &parse_formula("y ~ 1 + g + s(day, k=6) + sz(day, g, k=5) + fs(day, g, k=5) + ri(g)").unwrap(),
            &d,
        )
        .unwrap();
        let mut next = 0;
        for t in &m.design.terms {
            assert_eq!(t.start, next);
            next = t.end;
        }
        assert_eq!(next, m.x.ncols());
        for p in &m.design.penalties {
            let t = &m.design.terms[p.term];
            assert!(p.offset >= t.start && p.offset + p.width() <= t.end);
        }
    }

    #[test]
    fn predict_matrix_reproduces_training_design() {
        let d = grouped(25, &["a", "b", "c"]);
        let m = assemble_design(
            &parse_formula("y ~ 1 + g + s(day, k=6) + sz(day, g, k=5) + fs(day, g, k=5) + ri(g) + s(day, by=g, k=4)")
                .unwrap(),
            &d,
        )
        .unwrap();
        let xp = m.design.predict_matrix(&Grid::from_dataset(&d), &[], false).unwrap();
        assert!((xp - &m.x).abs().max() < 1e-12);
    }

    #[test]
    fn errors() {
        let d = grouped(5, &["a", "b"]);
        let e = assemble_design(&parse_formula("y ~ 1 + s(nope)").unwrap(), &d).unwrap_err();
        assert_eq!(e.kind(), "unknown_column");
        let e = assemble_design(&parse_formula("y ~ 1 + s(day, k=9)").unwrap(), &d).unwrap_err();
        assert_eq!(e.kind(), "basis_dimension");
        assert!(e.to_string().contains("s(day)"));
        let e = assemble_design(&parse_formula("y ~ 1 + fs(g, day)").unwrap(), &d).unwrap_err();
        assert_eq!(e.kind(), "column_type");
        let one = grouped(10, &["a"]);
        let e = assemble_design(&parse_formula("y ~ 1 + sz(day, g, k=3)").unwrap(), &one).unwrap_err();
        assert_eq!(e.kind(), "levels");
    }
}
