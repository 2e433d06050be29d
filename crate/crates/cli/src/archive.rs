//! Versioned JSON model archives.

use std::fs;
use std::path::Path;

use psgam::{Dataset, FittedModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub rows: usize,
    pub columns: Vec<String>,
    /// SHA-256 of the dataset written back as canonical CSV.
    pub sha256: String,
}

impl DatasetFingerprint {
    pub fn of(data: &Dataset) -> Self {
        let mut buf = Vec::new();
        data.write_csv(&mut buf).expect("in-memory write");
        let digest = Sha256::digest(&buf);
        DatasetFingerprint {
            rows: data.n_rows(),
            columns: data.names().to_vec(),
            sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub format_version: u32,
    pub formula: String,
    pub family: String,
    pub response: String,
    pub dataset: DatasetFingerprint,
    pub model: FittedModel,
}

impl ModelArchive {
    pub fn new(model: FittedModel, data: &Dataset) -> Self {
        ModelArchive {
            format_version: FORMAT_VERSION,
            formula: model.design.formula.text.clone(),
            family: model.family.to_string(),
            response: data.response_name().to_string(),
            dataset: DatasetFingerprint::of(data),
            model,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("archive serializes");
        s.push('\n');
        s
    }

    /// Parses an archive, checking the version before touching the body.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        #[derive(Deserialize)]
        struct Header {
            format_version: Option<u32>,
        }
        let header: Header = serde_json::from_str(text)
            .map_err(|e| CliError::input("archive", format!("not a model archive: {e}")))?;
        match header.format_version {
            Some(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(CliError::input(
                    "version",
                    format!("archive format version {v} is not supported (expected {FORMAT_VERSION})"),
                ))
            }
            None => return Err(CliError::input("archive", "archive has no format_version")),
        }
        serde_json::from_str(text).map_err(|e| CliError::input("archive", format!("corrupt archive body: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::input("io", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_json()).map_err(|e| CliError::input("io", format!("cannot write {}: {e}", path.display())))
    }
}
