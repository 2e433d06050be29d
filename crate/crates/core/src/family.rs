//! Response distributions with their link, variance and deviance functions.
//!
//! The Tweedie density has no closed form for 1 < p < 2. It is evaluated
//! here as a compound Poisson–gamma series in log space: the dominant term
//! is located first and the sum extends outward until terms fall below
//! 1e-17 of the largest one.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FamilyError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("Tweedie series did not converge: {0}")]
    Series(String),
    #[error("cannot parse family `{0}`")]
    Parse(String),
    #[error("Tweedie power must lie strictly inside (1, 2), got {0}")]
    Power(f64),
}

impl FamilyError {
    pub fn kind(&self) -> &'static str {
        match self {
            FamilyError::Domain(_) => "domain",
            FamilyError::Series(_) => "series",
            FamilyError::Parse(_) => "parse",
            FamilyError::Power(_) => "power",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Log,
}

impl Link {
    pub fn apply(self, mu: f64) -> Result<f64, FamilyError> {
        match self {
            Link::Identity => Ok(mu),
            Link::Log if mu > 0.0 => Ok(mu.ln()),
            Link::Log => Err(FamilyError::Domain(format!("log link needs mu > 0, got {mu}"))),
        }
    }

    pub fn invert(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Log => eta.exp(),
        }
    }

    /// dμ/dη.
    pub fn mu_eta(self, eta: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Log => eta.exp(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Log => "log",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Gaussian,
    Gamma,
    Tweedie,
}

/// A response distribution. For Tweedie, `power: None` means the power is
/// estimated from the data when fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub kind: FamilyKind,
    pub link: Link,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power: Option<f64>,
}

impl Family {
    pub fn gaussian() -> Self {
        Family {
            kind: FamilyKind::Gaussian,
            link: Link::Identity,
            power: None,
        }
    }

    pub fn gamma(link: Link) -> Self {
        Family {
            kind: FamilyKind::Gamma,
            link,
            power: None,
        }
    }

    pub fn tweedie(link: Link, power: Option<f64>) -> Result<Self, FamilyError> {
        if let Some(p) = power {
            check_power(p)?;
        }
        Ok(Family {
            kind: FamilyKind::Tweedie,
            link,
            power,
        })
    }

    pub fn with_power(self, p: f64) -> Result<Self, FamilyError> {
        check_power(p)?;
        Ok(Family {
            power: Some(p),
            ..self
        })
    }

    fn tweedie_power(&self) -> Result<f64, FamilyError> {
        match self.power {
            Some(p) => Ok(p),
            None => Err(FamilyError::Domain("Tweedie power has not been set".into())),
        }
    }

    /// Number of scale-type parameters counted in AIC (φ, and p for Tweedie).
    pub fn n_scale_params(&self) -> usize {
        match self.kind {
            FamilyKind::Gaussian | FamilyKind::Gamma => 1,
            FamilyKind::Tweedie => 2,
        }
    }

    pub fn link_apply(&self, mu: f64) -> Result<f64, FamilyError> {
        self.link.apply(mu)
    }

    pub fn link_invert(&self, eta: f64) -> f64 {
        self.link.invert(eta)
    }

    pub fn mu_eta(&self, eta: f64) -> f64 {
        self.link.mu_eta(eta)
    }

    /// V(μ): 1, μ² or μ^p.
    pub fn variance(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 1.0,
            FamilyKind::Gamma => mu * mu,
            FamilyKind::Tweedie => mu.powf(self.power.unwrap_or(1.5)),
        }
    }

    pub fn check_response(&self, y: f64) -> Result<(), FamilyError> {
        let ok = match self.kind {
            FamilyKind::Gaussian => y.is_finite(),
            FamilyKind::Gamma => y > 0.0 && y.is_finite(),
            FamilyKind::Tweedie => y >= 0.0 && y.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(FamilyError::Domain(format!("response {y} is outside the {} support", self.kind_name())))
        }
    }

    fn check_mean(&self, mu: f64) -> Result<(), FamilyError> {
        match self.kind {
            FamilyKind::Gaussian if mu.is_finite() => Ok(()),
            FamilyKind::Gamma | FamilyKind::Tweedie if mu > 0.0 && mu.is_finite() => Ok(()),
            _ => Err(FamilyError::Domain(format!("mean {mu} is invalid for {}", self.kind_name()))),
        }
    }

    /// Unit deviance d(y, μ) ≥ 0.
    pub fn unit_deviance(&self, y: f64, mu: f64) -> Result<f64, FamilyError> {
        self.check_response(y)?;
        self.check_mean(mu)?;
        let d = match self.kind {
            FamilyKind::Gaussian => (y - mu).powi(2),
            FamilyKind::Gamma => 2.0 * (-(y / mu).ln() + (y - mu) / mu),
            FamilyKind::Tweedie => {
                let p = self.tweedie_power()?;
                let mu2p = mu.powf(2.0 - p) / (2.0 - p);
                if y == 0.0 {
                    2.0 * mu2p
                } else {
                    2.0 * (y.powf(2.0 - p) / ((1.0 - p) * (2.0 - p)) - y * mu.powf(1.0 - p) / (1.0 - p)
                        + mu2p)
                }
            }
        };
        Ok(d.max(0.0))
    }

    /// Σ w_i d(y_i, μ_i).
    pub fn deviance(&self, y: &[f64], mu: &[f64], w: &[f64]) -> Result<f64, FamilyError> {
        let mut total = 0.0;
        for i in 0..y.len() {
            total += w[i] * self.unit_deviance(y[i], mu[i])?;
        }
        Ok(total)
    }

    /// log f(y; μ, φ). Prior weights enter through φ_i = φ / w_i.
    pub fn log_density(&self, y: f64, mu: f64, phi: f64) -> Result<f64, FamilyError> {
        if !(phi > 0.0) || !phi.is_finite() {
            return Err(FamilyError::Domain(format!("scale must be positive, got {phi}")));
        }
        self.check_response(y)?;
        match self.kind {
            FamilyKind::Gaussian => {
                self.check_mean(mu)?;
                Ok(-0.5 * (2.0 * std::f64::consts::PI * phi).ln() - (y - mu).powi(2) / (2.0 * phi))
            }
            FamilyKind::Gamma => {
                self.check_mean(mu)?;
                let shape = 1.0 / phi;
                Ok(shape * (y / (phi * mu)).ln() - y / (phi * mu) - y.ln() - ln_gamma(shape))
            }
            FamilyKind::Tweedie => {
                self.check_mean(mu)?;
                tweedie_log_density(y, mu, phi, self.tweedie_power()?)
            }
        }
    }

    fn kind_name(&self) -> &'static str {
        match self.kind {
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Gamma => "gamma",
            FamilyKind::Tweedie => "tweedie",
        }
    }
}

fn check_power(p: f64) -> Result<(), FamilyError> {
    if p > 1.0 && p < 2.0 {
        Ok(())
    } else {
        Err(FamilyError::Power(p))
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(link={}", self.kind_name(), self.link.name())?;
        if let Some(p) = self.power {
            write!(f, ", p={p}")?;
        }
        write!(f, ")")
    }
}

/// Parses `gaussian`, `gamma(link=log)`, `tweedie(link=log)` or
/// `tweedie(link=log, p=1.6)`. Defaults: identity link for gaussian, log
/// otherwise.
impl FromStr for Family {
    type Err = FamilyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || FamilyError::Parse(s.to_string());
        let s_trim = s.trim();
        let (name, args) = match s_trim.find('(') {
            Some(i) => {
                let rest = s_trim[i + 1..].trim_end();
                let inner = rest.strip_suffix(')').ok_or_else(err)?;
                (s_trim[..i].trim(), inner)
            }
            None => (s_trim, ""),
        };
        let mut link = None;
        let mut power = None;
        for arg in args.split(',').map(str::trim).filter(|a| !a.is_empty()) {
            let (key, value) = arg.split_once('=').ok_or_else(err)?;
            match key.trim() {
                "link" => {
                    link = Some(match value.trim() {
                        "identity" => Link::Identity,
                        "log" => Link::Log,
                        _ => return Err(err()),
                    })
                }
                "p" | "power" => power = Some(value.trim().parse::<f64>().map_err(|_| err())?),
                _ => return Err(err()),
            }
        }
        match name {
            "gaussian" if power.is_none() => Ok(Family {
                kind: FamilyKind::Gaussian,
                link: link.unwrap_or(Link::Identity),
                power: None,
            }),
            "gamma" | "Gamma" if power.is_none() => Ok(Family::gamma(link.unwrap_or(Link::Log))),
            "tweedie" | "Tweedie" => Family::tweedie(link.unwrap_or(Link::Log), power),
            _ => Err(err()),
        }
    }
}

const SERIES_LOG_TOL: f64 = -39.143_946_580_898_69; // ln(1e-17)
const SERIES_MAX_TERMS: usize = 5_000_000;

/// Tweedie log-density for 1 < p < 2.
pub fn tweedie_log_density(y: f64, mu: f64, phi: f64, p: f64) -> Result<f64, FamilyError> {
    tweedie_series(y, mu, phi, p, 0)
}

/// Series evaluation with `extra` additional doublings of the truncation
/// window on each side (0 = the standard 1e-17 cut-off).
pub fn tweedie_series(y: f64, mu: f64, phi: f64, p: f64, extra: u32) -> Result<f64, FamilyError> {
    check_power(p)?;
    if !(mu > 0.0) || !(phi > 0.0) || y < 0.0 {
        return Err(FamilyError::Domain(format!(
            "Tweedie density needs y >= 0, mu > 0, phi > 0 (y={y}, mu={mu}, phi={phi})"
        )));
    }
    // Poisson rate of the number of gamma summands, and the gamma shape and
    // scale of each summand.
    let lambda = mu.powf(2.0 - p) / (phi * (2.0 - p));
    if y == 0.0 {
        return Ok(-lambda);
    }
    let shape = (2.0 - p) / (p - 1.0);
    let scale = phi * (p - 1.0) * mu.powf(p - 1.0);
    let c = lambda.ln() + shape * (y / scale).ln();
    let term = |j: f64| j * c - ln_gamma(j + 1.0) - ln_gamma(j * shape);

    // Locate the dominant index, then climb to the exact maximum.
    let mut jmax = (y.powf(2.0 - p) / (phi * (2.0 - p))).round().max(1.0);
    let mut tmax = term(jmax);
    loop {
        let up = term(jmax + 1.0);
        if up > tmax {
            jmax += 1.0;
            tmax = up;
            continue;
        }
        if jmax > 1.0 {
            let dn = term(jmax - 1.0);
            if dn > tmax {
                jmax -= 1.0;
                tmax = dn;
                continue;
            }
        }
        break;
    }
    if !tmax.is_finite() {
        return Err(FamilyError::Series(format!("non-finite dominant term at y={y}, mu={mu}, phi={phi}")));
    }

    let mut sum = 1.0; // the dominant term, relative to itself
    let mut count = 0usize;
    for step in [1.0, -1.0] {
        let mut j = jmax + step;
        let mut stop: Option<f64> = None;
        while j >= 1.0 {
            let t = term(j) - tmax;
            if !t.is_finite() {
                return Err(FamilyError::Series(format!("non-finite term {j}")));
            }
            sum += t.exp();
            count += 1;
            if count > SERIES_MAX_TERMS {
                return Err(FamilyError::Series(format!(
                    "more than {SERIES_MAX_TERMS} terms at y={y}, phi={phi}"
                )));
            }
            if stop.is_none() && t < SERIES_LOG_TOL {
                // Widen the window past the cut-off when asked to.
                let width = (j - jmax).abs();
                stop = Some(j + step * width * ((1u64 << extra) - 1) as f64);
            }
            if let Some(s) = stop {
                if (j - s) * step >= 0.0 {
                    break;
                }
            }
            j += step;
        }
    }
    let log_w = tmax + sum.ln();
    let out = -lambda - y / scale - y.ln() + log_w;
    if out.is_finite() {
        Ok(out)
    } else {
        Err(FamilyError::Series(format!("non-finite result at y={y}, mu={mu}, phi={phi}")))
    }
}
