use thiserror::Error;

use crate::basis::BasisError;
use crate::data::DataError;
use crate::design::SpecError;
use crate::family::FamilyError;
use crate::fit::FitError;
use crate::inference::InferenceError;

/// Crate-wide error. Each variant corresponds to one subsystem, so callers
/// (the CLI in particular) can report `module:kind` pairs without string
/// matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

impl Error {
    pub fn module(&self) -> &'static str {
        match self {
            Error::Data(_) => "data_model",
            Error::Basis(_) => "basis_engine",
            Error::Family(_) => "families",
            Error::Spec(_) => "model_spec",
            Error::Fit(_) => "fitter",
            Error::Inference(_) => "inference",
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Data(e) => e.kind(),
            Error::Basis(e) => e.kind(),
            Error::Family(e) => e.kind(),
            Error::Spec(e) => e.kind(),
            Error::Fit(e) => e.kind(),
            Error::Inference(e) => e.kind(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
