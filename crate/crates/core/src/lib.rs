// `!(a > b)` is used on purpose so that NaN fails validation checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod data;
pub mod design;
mod error;
pub mod family;
pub mod fit;
pub mod inference;
mod linalg;
pub mod simulate;

pub use data::{Column, Dataset, Factor, Schema};
pub use design::{assemble_design, parse_formula, Design, Formula, Grid, GridColumn, ModelMatrices};
pub use error::{Error, Result};
pub use family::{Family, FamilyKind, Link};
pub use fit::{fit_gam, Criterion, FitOptions, FittedModel};
pub use linalg::{serde_dmatrix, serde_dvector};
