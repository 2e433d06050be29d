use std::fmt;

use psgam::family::FamilyError;
use psgam::fit::FitError;
use psgam::Error;

/// A command failure carrying the `module:kind` pair printed on stderr and
/// the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub module: &'static str,
    pub kind: &'static str,
    pub message: String,
    pub code: i32,
}

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_REQUEST: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

impl CliError {
    pub fn new(kind: &'static str, code: i32, message: impl Into<String>) -> Self {
        CliError {
            module: "cli",
            kind,
            message: message.into(),
            code,
        }
    }

    pub fn input(kind: &'static str, message: impl Into<String>) -> Self {
        Self::new(kind, EXIT_INPUT, message)
    }

    pub fn request(kind: &'static str, message: impl Into<String>) -> Self {
        Self::new(kind, EXIT_REQUEST, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Keep the report on one line whatever the message contains.
        let msg = self.message.replace(['\n', '\r'], " ");
        write!(f, "ERROR:{}:{}: {}", self.module, self.kind, msg)
    }
}

impl std::error::Error for CliError {}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Inference(_) => EXIT_REQUEST,
        Error::Fit(FitError::Family(FamilyError::Series(_))) => EXIT_NUMERICAL,
        Error::Fit(FitError::Input(_) | FitError::Family(_)) => EXIT_INPUT,
        Error::Fit(_) => EXIT_NUMERICAL,
        Error::Data(_) | Error::Basis(_) | Error::Family(_) | Error::Spec(_) => EXIT_INPUT,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            module: e.module(),
            kind: e.kind(),
            message: e.to_string(),
            code: exit_code(&e),
        }
    }
}

macro_rules! via_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}

via_core!(
    psgam::data::DataError,
    psgam::design::SpecError,
    FamilyError,
    FitError,
    psgam::inference::InferenceError
);
