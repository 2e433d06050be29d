use serde::{Deserialize, Serialize};

use super::SpecError;
use crate::basis::{BasisKind, BasisSpec};

/// Basis dimension used when a smooth term omits `k`.
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Intercept,
    /// Numeric covariate entering linearly (possibly log-transformed).
    Linear,
    /// Parametric factor with treatment contrasts.
    Factor,
    /// `s(x)`: sum-to-zero constrained smooth.
    Smooth,
    /// `s(x, by = f)`: one constrained smooth per factor level.
    BySmooth,
    /// `sz(x, f, ...)`: per-level deviations constrained orthogonal to the
    /// main-effect smooth.
    FsInteraction,
    /// `fs(x, f)`: fully penalized per-level smooths sharing λ.
    RandomSmooth,
    /// `ri(f)`: iid random intercept.
    RandomIntercept,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Log,
}

impl Transform {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Transform::Log => v.ln(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub kind: TermKind,
    /// Numeric covariate, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate: Option<String>,
    /// Factor columns: the `by` factor, the `sz`/`fs` grouping factors, the
    /// `ri` factor, or the parametric factor itself.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub factors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<Transform>,
    /// Basis for smooth terms. `k` here is the dimension requested in the
    /// formula (post-constraint for constrained terms).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<BasisSpec>,
    pub label: String,
}

impl TermSpec {
    fn parametric(kind: TermKind, name: &str, transform: Option<Transform>) -> Self {
        let label = match transform {
            Some(Transform::Log) => format!("log({name})"),
            None => name.to_string(),
        };
        TermSpec {
            kind,
            covariate: if kind == TermKind::Intercept { None } else { Some(name.to_string()) },
            factors: Vec::new(),
            transform,
            basis: None,
            label,
        }
    }

    pub fn intercept() -> Self {
        TermSpec {
            kind: TermKind::Intercept,
            covariate: None,
            factors: Vec::new(),
            transform: None,
            basis: None,
            label: "(Intercept)".into(),
        }
    }

    pub fn is_penalized(&self) -> bool {
        !matches!(self.kind, TermKind::Intercept | TermKind::Linear | TermKind::Factor)
    }

    /// Every data column the term reads.
    pub fn columns(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        if let Some(c) = &self.covariate {
            out.push(c);
        }
        out.extend(self.factors.iter().map(String::as_str));
        out
    }
}

/// A parsed model formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Formula {
    pub text: String,
    pub response: String,
    pub terms: Vec<TermSpec>,
}

impl Formula {
    pub fn term_index(&self, label: &str) -> Option<usize> {
        self.terms.iter().position(|t| t.label == label)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(String),
    LParen,
    RParen,
    Comma,
    Plus,
    Tilde,
    Eq,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>, SpecError> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '(' | ')' | ',' | '+' | '~' | '=' => {
                out.push((
                    pos,
                    match c {
                        '(' => Tok::LParen,
                        ')' => Tok::RParen,
                        ',' => Tok::Comma,
                        '+' => Tok::Plus,
                        '~' => Tok::Tilde,
                        _ => Tok::Eq,
                    },
                ));
                i += 1;
            }
            c if c.is_ascii_digit() || c == '.' || c == '-' => {
                let start = i;
                i += 1;
                while i < chars.len() && (chars[i].1.is_ascii_alphanumeric() || chars[i].1 == '.') {
                    i += 1;
                }
                out.push((pos, Tok::Number(chars[start..i].iter().map(|(_, c)| c).collect())));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].1.is_alphanumeric() || chars[i].1 == '_' || chars[i].1 == '.') {
                    i += 1;
                }
                out.push((pos, Tok::Ident(chars[start..i].iter().map(|(_, c)| c).collect())));
            }
            other => {
                return Err(SpecError::Parse {
                    pos,
                    message: format!("unexpected character `{other}`"),
                })
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: &'a [(usize, Tok)],
    i: usize,
    len: usize,
}

enum Arg {
    Positional(usize, String),
    Named(usize, String, String),
}

impl<'a> Parser<'a> {
    fn pos(&self) -> usize {
        self.toks.get(self.i).map(|t| t.0).unwrap_or(self.len)
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.i).map(|t| &t.1)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.i).map(|t| t.1.clone());
        self.i += 1;
        t
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, SpecError> {
        Err(SpecError::Parse {
            pos: self.pos(),
            message: message.into(),
        })
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), SpecError> {
        if self.peek() == Some(&tok) {
            self.i += 1;
            Ok(())
        } else {
            self.err(format!("expected {what}"))
        }
    }

    fn ident(&mut self) -> Result<String, SpecError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.i += 1;
                Ok(s)
            }
            _ => self.err("expected a name"),
        }
    }

    fn args(&mut self) -> Result<Vec<Arg>, SpecError> {
        self.expect(Tok::LParen, "`(`")?;
        let mut args = Vec::new();
        loop {
            let pos = self.pos();
            let value = match self.next() {
                Some(Tok::Ident(s)) | Some(Tok::Number(s)) => s,
                _ => {
                    self.i -= 1;
                    return self.err("expected an argument");
                }
            };
            if self.peek() == Some(&Tok::Eq) {
                self.i += 1;
                let v = match self.next() {
                    Some(Tok::Ident(s)) | Some(Tok::Number(s)) => s,
                    _ => {
                        self.i -= 1;
                        return self.err("expected a value after `=`");
                    }
                };
                args.push(Arg::Named(pos, value, v));
            } else {
                args.push(Arg::Positional(pos, value));
            }
            match self.next() {
                Some(Tok::Comma) => continue,
                Some(Tok::RParen) => break,
                _ => {
                    self.i -= 1;
                    return self.err("expected `,` or `)`");
                }
            }
        }
        Ok(args)
    }
}

fn parse_k(pos: usize, v: &str) -> Result<usize, SpecError> {
    v.parse::<usize>().map_err(|_| SpecError::Parse {
        pos,
        message: format!("k must be a positive integer, got `{v}`"),
    })
}

fn parse_bs(pos: usize, v: &str) -> Result<BasisKind, SpecError> {
    match v {
        "tp" => Ok(BasisKind::Tprs),
        "bs" | "ps" => Ok(BasisKind::Bspline),
        _ => Err(SpecError::Parse {
            pos,
            message: format!("unknown basis `{v}` (expected tp or bs)"),
        }),
    }
}

fn basis_spec(kind: BasisKind, covariate: &str, k: usize) -> BasisSpec {
    match kind {
        BasisKind::Bspline => BasisSpec::bspline(covariate, k),
        _ => BasisSpec::tprs(covariate, k),
    }
}

/// Parses a formula such as
/// `y ~ 1 + treat + s(day, k=9) + sz(day, treat) + fs(day, egg, k=6) + ri(mother)`.
///
/// Bare names become linear terms; whether they are numeric or factors is
/// resolved against the data when the design is assembled. An intercept
/// is added when `1` is not written.
pub fn parse_formula(text: &str) -> Result<Formula, SpecError> {
    let toks = tokenize(text)?;
    let mut p = Parser {
        toks: &toks,
        i: 0,
        len: text.len(),
    };
    let response = p.ident()?;
    p.expect(Tok::Tilde, "`~` after the response")?;
    let mut terms: Vec<TermSpec> = Vec::new();
    let mut intercept_seen = false;
    loop {
        let pos = p.pos();
        match p.next() {
            Some(Tok::Number(n)) if n == "1" => {
                if intercept_seen {
                    return Err(SpecError::Parse {
                        pos,
                        message: "duplicate intercept".into(),
                    });
                }
                intercept_seen = true;
                terms.insert(0, TermSpec::intercept());
            }
            Some(Tok::Number(n)) if n == "0" || n == "-1" => {
                return Err(SpecError::Parse {
                    pos,
                    message: "models without an intercept are not supported".into(),
                })
            }
            Some(Tok::Ident(name)) => {
                if p.peek() == Some(&Tok::LParen) {
                    let args = p.args()?;
                    terms.push(function_term(pos, &name, args)?);
                } else {
                    terms.push(TermSpec::parametric(TermKind::Linear, &name, None));
                }
            }
            _ => {
                p.i -= 1;
                return p.err("expected a term");
            }
        }
        match p.next() {
            None => break,
            Some(Tok::Plus) => continue,
            Some(_) => {
                p.i -= 1;
                return p.err("expected `+` between terms");
            }
        }
    }
    if !intercept_seen {
        terms.insert(0, TermSpec::intercept());
    }
    for (i, t) in terms.iter().enumerate() {
        if terms[..i].iter().any(|u| u.label == t.label) {
            return Err(SpecError::Parse {
                pos: 0,
                message: format!("term `{}` appears twice", t.label),
            });
        }
    }
    Ok(Formula {
        text: text.to_string(),
        response,
        terms,
    })
}

fn function_term(pos: usize, name: &str, args: Vec<Arg>) -> Result<TermSpec, SpecError> {
    let mut positional = Vec::new();
    let mut k = None;
    let mut bs = None;
    let mut by = None;
    for a in args {
        match a {
            Arg::Positional(p, v) => positional.push((p, v)),
            Arg::Named(p, key, v) => match key.as_str() {
                "k" => k = Some(parse_k(p, &v)?),
                "bs" => bs = Some(parse_bs(p, &v)?),
                "by" => by = Some(v),
                _ => {
                    return Err(SpecError::Parse {
                        pos: p,
                        message: format!("unknown argument `{key}` to {name}()"),
                    })
                }
            },
        }
    }
    let bad = |message: String| SpecError::Parse { pos, message };
    let needs_no_options = |what: &str| -> Result<(), SpecError> {
        if k.is_some() || bs.is_some() || by.is_some() {
            Err(bad(format!("{what}() takes no options")))
        } else {
            Ok(())
        }
    };
    let kind = bs.unwrap_or(BasisKind::Tprs);
    let k = k.unwrap_or(DEFAULT_K);
    match name {
        "log" => {
            needs_no_options("log")?;
            if positional.len() != 1 {
                return Err(bad("log() takes exactly one covariate".into()));
            }
            Ok(TermSpec::parametric(TermKind::Linear, &positional[0].1, Some(Transform::Log)))
        }
        "ri" => {
            needs_no_options("ri")?;
            if positional.len() != 1 {
                return Err(bad("ri() takes exactly one factor".into()));
            }
            let f = positional[0].1.clone();
            Ok(TermSpec {
                kind: TermKind::RandomIntercept,
                covariate: None,
                factors: vec![f.clone()],
                transform: None,
                basis: None,
                label: format!("ri({f})"),
            })
        }
        "s" => {
            if positional.len() != 1 {
                return Err(bad("s() takes exactly one covariate".into()));
            }
            let x = positional[0].1.clone();
            Ok(match by {
                Some(f) => TermSpec {
                    kind: TermKind::BySmooth,
                    covariate: Some(x.clone()),
                    factors: vec![f.clone()],
                    transform: None,
                    basis: Some(basis_spec(kind, &x, k)),
                    label: format!("s({x}):{f}"),
                },
                None => TermSpec {
                    kind: TermKind::Smooth,
                    covariate: Some(x.clone()),
                    factors: Vec::new(),
                    transform: None,
                    basis: Some(basis_spec(kind, &x, k)),
                    label: format!("s({x})"),
                },
            })
        }
        "sz" | "fs" => {
            if by.is_some() {
                return Err(bad(format!("{name}() does not accept by=")));
            }
            if positional.len() < 2 || (name == "fs" && positional.len() != 2) {
                return Err(bad(format!(
                    "{name}() takes a covariate followed by {}",
                    if name == "fs" { "one factor" } else { "one or more factors" }
                )));
            }
            let x = positional[0].1.clone();
            let factors: Vec<String> = positional[1..].iter().map(|(_, v)| v.clone()).collect();
            Ok(TermSpec {
                kind: if name == "sz" { TermKind::FsInteraction } else { TermKind::RandomSmooth },
                covariate: Some(x.clone()),
                label: format!("{name}({x},{})", factors.join(",")),
                factors,
                transform: None,
                basis: Some(basis_spec(kind, &x, k)),
            })
        }
        other => Err(bad(format!("unknown function `{other}`"))),
    }
}
