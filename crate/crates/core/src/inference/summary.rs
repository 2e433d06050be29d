use std::fmt;

use serde::{Deserialize, Serialize};

use super::term_test;
use crate::design::TermKind;
use crate::fit::FittedModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSummary {
    pub label: String,
    pub penalized: bool,
    pub k: usize,
    pub columns: usize,
    pub edf: f64,
    pub ref_df: f64,
    pub statistic: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub formula: String,
    pub family: String,
    pub criterion: String,
    pub criterion_value: f64,
    pub n: usize,
    pub phi: f64,
    pub power: Option<f64>,
    pub edf_total: f64,
    pub log_likelihood: f64,
    pub aic: f64,
    pub deviance: f64,
    pub deviance_explained: f64,
    pub rmse: f64,
    pub lambdas: Vec<(String, f64)>,
    pub terms: Vec<TermSummary>,
}

pub fn summarize(model: &FittedModel) -> Summary {
    let mut terms = Vec::new();
    for t in &model.design.terms {
        if t.kind() == TermKind::Intercept {
            continue;
        }
        let Ok(test) = term_test(model, t.label()) else {
            continue;
        };
        terms.push(TermSummary {
            label: t.label().to_string(),
            penalized: t.spec.is_penalized(),
            k: t.k_basis,
            columns: t.width(),
            edf: test.edf,
            ref_df: test.df1,
            statistic: test.statistic,
            p: test.p,
        });
    }
    Summary {
        formula: model.design.formula.text.clone(),
        family: model.family.to_string(),
        criterion: model.criterion.to_string(),
        criterion_value: model.criterion_value,
        n: model.n,
        phi: model.phi,
        power: model.power(),
        edf_total: model.edf_total,
        log_likelihood: model.log_likelihood,
        aic: model.aic,
        deviance: model.deviance,
        deviance_explained: model.deviance_explained,
        rmse: model.rmse,
        lambdas: model
            .design
            .groups
            .iter()
            .cloned()
            .zip(model.lambdas.iter().copied())
            .collect(),
        terms,
    }
}

fn fmt_p(p: f64) -> String {
    if p < 1e-16 {
        "<1e-16".to_string()
    } else if p < 1e-4 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Formula: {}", self.formula)?;
        writeln!(f, "Family: {}", self.family)?;
        writeln!(f, "n = {}  {} = {:.6}", self.n, self.criterion, self.criterion_value)?;
        if let Some(p) = self.power {
            writeln!(f, "Tweedie power: {p:.4}")?;
        }
        writeln!(
            f,
            "Total EDF = {:.3}  scale = {:.6}  logLik = {:.4}  AIC = {:.4}",
            self.edf_total, self.phi, self.log_likelihood, self.aic
        )?;
        writeln!(
            f,
            "Deviance = {:.6}  explained = {:.2}%  RMSE = {:.6}",
            self.deviance,
            100.0 * self.deviance_explained,
            self.rmse
        )?;
        if !self.terms.is_empty() {
            let w = self.terms.iter().map(|t| t.label.len()).max().unwrap_or(4).max(4);
            writeln!(f)?;
            writeln!(f, "{:<w$}  {:>8}  {:>7}  {:>10}  {:>10}", "term", "edf", "ref.df", "F", "p-value")?;
            for t in &self.terms {
                writeln!(
                    f,
                    "{:<w$}  {:>8.3}  {:>7.0}  {:>10.4}  {:>10}",
                    t.label,
                    t.edf,
                    t.ref_df,
                    t.statistic,
                    fmt_p(t.p)
                )?;
            }
        }
        if !self.lambdas.is_empty() {
            writeln!(f)?;
            writeln!(f, "Smoothing parameters:")?;
            for (g, l) in &self.lambdas {
                writeln!(f, "  {g}: {l:.6e}")?;
            }
        }
        Ok(())
    }
}
