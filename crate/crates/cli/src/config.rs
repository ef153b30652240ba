//! TOML model configuration.
//!
//! ```toml
//! [model]
//! n = 1                 # securities
//! d0 = 1                # common Brownian dimension (default 1)
//! d = 1                 # idiosyncratic Brownian dimension (default 1)
//! horizon = 1.0
//! steps = 100
//! delta = 0.2           # default 0
//! mode = "general"      # or "futures"
//! lambda = 1.5          # number (times identity) or array of rows
//! regime = "short-t"    # multi-population only: "short-t" or "general-t"
//!
//! [lq]                  # every block defaults to zero
//! k_l = 0.8
//! q = [[1.0]]
//! l_const = [0.1]       # vectors: number (broadcast) or array
//!
//! [psi]
//! kind = "saturating"   # or "identity"
//! scale = 1.0
//! slope = 1.0
//! range = 1.5
//!
//! [common_factor]       # kappa, theta, c_init vectors; eta is n x d0
//! [idio_factor]         # eta is n x d
//! [initial_law]         # mean vector, cov matrix
//!
//! [[populations]]       # optional; presence switches to the multi-population model
//! weight = 0.5
//! lambda = 2.0          # defaults to model.lambda
//! lq = { k_l = 0.2 }    # keys override the top-level [lq]
//! idio_factor = { ... } # replaces the top-level section
//! initial_law = { ... }
//! ```

use std::fmt;
use std::ops::Range;

use mfclear_core::multipop::{MultiPopSpec, Population, Regime};
use mfclear_core::{InitialLaw, LqCoefficients, Mat, ModelSpec, OuSpec, PriceMap, TerminalMode, Vector};
use serde::Deserialize;
use toml::Spanned;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub message: String,
    pub key: Option<String>,
    pub line: Option<usize>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.line, &self.key) {
            (Some(l), Some(k)) => write!(f, "config error at line {l}, key `{k}`: {}", self.message),
            (None, Some(k)) => write!(f, "config error, key `{k}`: {}", self.message),
            (Some(l), None) => write!(f, "config error at line {l}: {}", self.message),
            (None, None) => write!(f, "config error: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum MatrixValue {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum VectorValue {
    Scalar(f64),
    List(Vec<f64>),
}

type MatField = Option<Spanned<MatrixValue>>;
type VecField = Option<Spanned<VectorValue>>;

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ModeName {
    General,
    Futures,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum RegimeName {
    ShortT,
    GeneralT,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum PsiKind {
    Identity,
    Saturating,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    n: usize,
    d0: Option<usize>,
    d: Option<usize>,
    horizon: f64,
    steps: usize,
    delta: Option<f64>,
    mode: Option<ModeName>,
    lambda: MatField,
    regime: Option<RegimeName>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLq {
    k_l: MatField,
    l_c0: MatField,
    l_c: MatField,
    l_const: VecField,
    q: MatField,
    f_phi: MatField,
    f_c0: MatField,
    f_c: MatField,
    f_const: VecField,
    p: MatField,
    g_c0: MatField,
    g_c: MatField,
    g_const: VecField,
    sigma0: MatField,
    sigma: MatField,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPsi {
    kind: PsiKind,
    scale: Option<f64>,
    slope: Option<f64>,
    range: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOu {
    kappa: VecField,
    theta: VecField,
    eta: MatField,
    c_init: VecField,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    mean: VecField,
    cov: MatField,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPopulation {
    weight: f64,
    lambda: MatField,
    lq: Option<RawLq>,
    idio_factor: Option<RawOu>,
    initial_law: Option<RawInitial>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: RawModel,
    #[serde(default)]
    lq: RawLq,
    psi: Option<RawPsi>,
    common_factor: Option<RawOu>,
    idio_factor: Option<RawOu>,
    initial_law: Option<RawInitial>,
    #[serde(default)]
    populations: Vec<RawPopulation>,
}

/// A parsed model: one population or several.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    Single(ModelSpec),
    Multi(MultiPopSpec),
}

impl ModelConfig {
    pub fn n(&self) -> usize {
        match self {
            ModelConfig::Single(s) => s.n,
            ModelConfig::Multi(s) => s.n,
        }
    }

    pub fn set_steps(&mut self, steps: usize) {
        match self {
            ModelConfig::Single(s) => s.steps = steps,
            ModelConfig::Multi(s) => s.steps = steps,
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            ModelConfig::Single(s) => s.steps,
            ModelConfig::Multi(s) => s.steps,
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            ModelConfig::Single(s) => s.horizon,
            ModelConfig::Multi(s) => s.horizon,
        }
    }
}

struct Ctx<'a> {
    src: &'a str,
}

impl Ctx<'_> {
    fn line(&self, span: Range<usize>) -> usize {
        self.src[..span.start.min(self.src.len())].matches('\n').count() + 1
    }

    fn err<T>(&self, key: &str, span: Option<Range<usize>>, message: impl Into<String>) -> Result<T, ConfigError> {
        Err(ConfigError {
            message: message.into(),
            key: Some(key.to_string()),
            line: span.map(|s| self.line(s)),
        })
    }

    fn matrix(&self, field: &MatField, key: &str, rows: usize, cols: usize, default: Mat) -> Result<Mat, ConfigError> {
        let Some(v) = field else { return Ok(default) };
        let span = Some(v.span());
        match v.get_ref() {
            MatrixValue::Scalar(s) => Ok(Mat::identity(rows, cols) * *s),
            MatrixValue::Rows(r) => {
                if r.len() != rows || r.iter().any(|row| row.len() != cols) {
                    let got_cols = r.first().map_or(0, |row| row.len());
                    return self.err(
                        key,
                        span,
                        format!("expected a {rows}x{cols} matrix, got {}x{got_cols}", r.len()),
                    );
                }
                Ok(Mat::from_fn(rows, cols, |i, j| r[i][j]))
            }
        }
    }

    fn vector(&self, field: &VecField, key: &str, len: usize, default: Vector) -> Result<Vector, ConfigError> {
        let Some(v) = field else { return Ok(default) };
        match v.get_ref() {
            VectorValue::Scalar(s) => Ok(Vector::from_element(len, *s)),
            VectorValue::List(l) => {
                if l.len() != len {
                    return self.err(key, Some(v.span()), format!("expected length {len}, got {}", l.len()));
                }
                Ok(Vector::from_column_slice(l))
            }
        }
    }

    fn lq(&self, raw: &RawLq, prefix: &str, n: usize, d0: usize, d: usize, base: &LqCoefficients) -> Result<LqCoefficients, ConfigError> {
        let k = |name: &str| format!("{prefix}.{name}");
        Ok(LqCoefficients {
            k_l: self.matrix(&raw.k_l, &k("k_l"), n, n, base.k_l.clone())?,
            l_c0: self.matrix(&raw.l_c0, &k("l_c0"), n, n, base.l_c0.clone())?,
            l_c: self.matrix(&raw.l_c, &k("l_c"), n, n, base.l_c.clone())?,
            l_const: self.vector(&raw.l_const, &k("l_const"), n, base.l_const.clone())?,
            q: self.matrix(&raw.q, &k("q"), n, n, base.q.clone())?,
            f_phi: self.matrix(&raw.f_phi, &k("f_phi"), n, n, base.f_phi.clone())?,
            f_c0: self.matrix(&raw.f_c0, &k("f_c0"), n, n, base.f_c0.clone())?,
            f_c: self.matrix(&raw.f_c, &k("f_c"), n, n, base.f_c.clone())?,
            f_const: self.vector(&raw.f_const, &k("f_const"), n, base.f_const.clone())?,
            p: self.matrix(&raw.p, &k("p"), n, n, base.p.clone())?,
            g_c0: self.matrix(&raw.g_c0, &k("g_c0"), n, n, base.g_c0.clone())?,
            g_c: self.matrix(&raw.g_c, &k("g_c"), n, n, base.g_c.clone())?,
            g_const: self.vector(&raw.g_const, &k("g_const"), n, base.g_const.clone())?,
            sigma0: self.matrix(&raw.sigma0, &k("sigma0"), n, d0, base.sigma0.clone())?,
            sigma: self.matrix(&raw.sigma, &k("sigma"), n, d, base.sigma.clone())?,
        })
    }

    fn ou(&self, raw: Option<&RawOu>, key: &str, n: usize, q: usize) -> Result<OuSpec, ConfigError> {
        let base = OuSpec::constant(Vector::zeros(n), q);
        let Some(raw) = raw else { return Ok(base) };
        Ok(OuSpec {
            kappa: self.vector(&raw.kappa, &format!("{key}.kappa"), n, base.kappa)?,
            theta: self.vector(&raw.theta, &format!("{key}.theta"), n, base.theta)?,
            eta: self.matrix(&raw.eta, &format!("{key}.eta"), n, q, base.eta)?,
            c_init: self.vector(&raw.c_init, &format!("{key}.c_init"), n, base.c_init)?,
        })
    }

    fn initial(&self, raw: Option<&RawInitial>, key: &str, n: usize) -> Result<InitialLaw, ConfigError> {
        let Some(raw) = raw else { return Ok(InitialLaw::point(Vector::zeros(n))) };
        Ok(InitialLaw {
            mean: self.vector(&raw.mean, &format!("{key}.mean"), n, Vector::zeros(n))?,
            cov: self.matrix(&raw.cov, &format!("{key}.cov"), n, n, Mat::zeros(n, n))?,
        })
    }
}

fn toml_error(e: toml::de::Error, src: &str) -> ConfigError {
    let start = e.span().map(|s| s.start.min(src.len()));
    let message = e.message().trim().to_string();
    let message = if message.contains("untagged enum MatrixValue") {
        "expected a number or an array of rows".to_string()
    } else if message.contains("untagged enum VectorValue") {
        "expected a number or an array".to_string()
    } else {
        message
    };
    ConfigError {
        message,
        key: start.and_then(|s| key_at(src, s)),
        line: start.map(|s| src[..s].matches('\n').count() + 1),
    }
}

/// Dotted key of the `key = value` line containing byte `offset`, prefixed by
/// the nearest table header above it.
fn key_at(src: &str, offset: usize) -> Option<String> {
    let line_start = src[..offset].rfind('\n').map_or(0, |i| i + 1);
    let line = src[line_start..].lines().next().unwrap_or("");
    let (name, _) = line.split_once('=')?;
    let name = name.trim().trim_matches('"');
    if name.is_empty() || name.starts_with('[') {
        return None;
    }
    let section = src[..line_start].lines().rev().find_map(|l| {
        let l = l.trim();
        l.starts_with('[').then(|| l.trim_matches(|c| c == '[' || c == ']').trim().to_string())
    });
    Some(match section {
        Some(sec) => format!("{sec}.{name}"),
        None => name.to_string(),
    })
}

/// Parses configuration text.
pub fn parse_config(src: &str) -> Result<ModelConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(src).map_err(|e| toml_error(e, src))?;
    let cx = Ctx { src };
    let m = &raw.model;
    let n = m.n;
    let d0 = m.d0.unwrap_or(1);
    let d = m.d.unwrap_or(1);
    if n == 0 || d0 == 0 || d == 0 {
        return cx.err("model.n", None, "n, d0 and d must be positive");
    }
    let lambda = cx.matrix(&m.lambda, "model.lambda", n, n, Mat::identity(n, n))?;
    let lq = cx.lq(&raw.lq, "lq", n, d0, d, &LqCoefficients::zeros(n, d0, d))?;
    let psi = match &raw.psi {
        None => PriceMap::Identity,
        Some(p) => match p.kind {
            PsiKind::Identity => PriceMap::Identity,
            PsiKind::Saturating => PriceMap::Saturating {
                scale: p.scale.unwrap_or(1.0),
                slope: p.slope.unwrap_or(1.0),
                range: p.range.unwrap_or(1.0),
            },
        },
    };
    let mode = match m.mode.unwrap_or(ModeName::General) {
        ModeName::General => TerminalMode::General,
        ModeName::Futures => TerminalMode::Futures,
    };
    let common_factor = cx.ou(raw.common_factor.as_ref(), "common_factor", n, d0)?;
    let idio_factor = cx.ou(raw.idio_factor.as_ref(), "idio_factor", n, d)?;
    let initial_law = cx.initial(raw.initial_law.as_ref(), "initial_law", n)?;
    let delta = m.delta.unwrap_or(0.0);

    if raw.populations.is_empty() {
        if m.regime.is_some() {
            return cx.err("model.regime", None, "regime only applies to [[populations]] models");
        }
        return Ok(ModelConfig::Single(ModelSpec {
            n,
            d0,
            d,
            horizon: m.horizon,
            steps: m.steps,
            lambda,
            delta,
            lq,
            psi,
            common_factor,
            idio_factor,
            initial_law,
            mode,
        }));
    }
    if !psi.is_identity() {
        return cx.err("psi.kind", None, "multi-population models require the identity price map");
    }
    let mut populations = Vec::with_capacity(raw.populations.len());
    for (p, pop) in raw.populations.iter().enumerate() {
        let key = format!("populations[{p}]");
        let lq = match &pop.lq {
            Some(r) => cx.lq(r, &format!("{key}.lq"), n, d0, d, &lq)?,
            None => lq.clone(),
        };
        populations.push(Population {
            weight: pop.weight,
            lambda: cx.matrix(&pop.lambda, &format!("{key}.lambda"), n, n, lambda.clone())?,
            lq,
            idio_factor: match &pop.idio_factor {
                Some(r) => cx.ou(Some(r), &format!("{key}.idio_factor"), n, d)?,
                None => idio_factor.clone(),
            },
            initial_law: match &pop.initial_law {
                Some(r) => cx.initial(Some(r), &format!("{key}.initial_law"), n)?,
                None => initial_law.clone(),
            },
        });
    }
    Ok(ModelConfig::Multi(MultiPopSpec {
        n,
        d0,
        d,
        horizon: m.horizon,
        steps: m.steps,
        delta,
        mode,
        regime: match m.regime.unwrap_or(RegimeName::ShortT) {
            RegimeName::ShortT => Regime::ShortT,
            RegimeName::GeneralT => Regime::GeneralT,
        },
        common_factor,
        populations,
    }))
}
