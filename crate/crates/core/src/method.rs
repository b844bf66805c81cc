//! Method identifiers and their parameters.
//!
//! A [`MethodSpec`] is the unit of "a method" everywhere in the engine: score
//! files, result tables and rankings are keyed by [`MethodSpec::key`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traces::Field;

pub const DEFAULT_K_PERCENT: f64 = 20.0;
pub const DEFAULT_WINDOW: usize = 4;
pub const DEFAULT_BINS: usize = 8;
pub const DEFAULT_SCALES: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Loss,
    Rank,
    Logrank,
    Entropy,
    Lrt,
    Reference,
    Zlib,
    Dcpdd,
    Binoculars,
    Neighborhood,
    Detectgpt,
    FastDetectgpt,
    DetectllmNpr,
    Recall,
    MinK,
    MinKPp,
    Lastde,
    LastdePp,
}

/// Where a method comes from, used to tag points in the transfer report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Mia,
    Detection,
    Baseline,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Mia => "mia",
            Family::Detection => "detection",
            Family::Baseline => "baseline",
        }
    }
}

impl Method {
    pub const ALL: [Method; 18] = [
        Method::Loss,
        Method::Rank,
        Method::Logrank,
        Method::Entropy,
        Method::Lrt,
        Method::Reference,
        Method::Zlib,
        Method::Dcpdd,
        Method::Binoculars,
        Method::Neighborhood,
        Method::Detectgpt,
        Method::FastDetectgpt,
        Method::DetectllmNpr,
        Method::Recall,
        Method::MinK,
        Method::MinKPp,
        Method::Lastde,
        Method::LastdePp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Loss => "loss",
            Method::Rank => "rank",
            Method::Logrank => "logrank",
            Method::Entropy => "entropy",
            Method::Lrt => "lrt",
            Method::Reference => "reference",
            Method::Zlib => "zlib",
            Method::Dcpdd => "dcpdd",
            Method::Binoculars => "binoculars",
            Method::Neighborhood => "neighborhood",
            Method::Detectgpt => "detectgpt",
            Method::FastDetectgpt => "fast_detectgpt",
            Method::DetectllmNpr => "detectllm_npr",
            Method::Recall => "recall",
            Method::MinK => "min_k",
            Method::MinKPp => "min_k_pp",
            Method::Lastde => "lastde",
            Method::LastdePp => "lastde_pp",
        }
    }

    pub fn family(self) -> Family {
        match self {
            Method::Reference
            | Method::Zlib
            | Method::Dcpdd
            | Method::Neighborhood
            | Method::Recall
            | Method::MinK
            | Method::MinKPp => Family::Mia,
            Method::Binoculars
            | Method::Detectgpt
            | Method::FastDetectgpt
            | Method::DetectllmNpr
            | Method::Lastde
            | Method::LastdePp => Family::Detection,
            Method::Loss | Method::Rank | Method::Logrank | Method::Entropy | Method::Lrt => {
                Family::Baseline
            }
        }
    }

    /// Trace fields that must be present for the method to score a document.
    pub fn required_fields(self) -> &'static [Field] {
        match self {
            Method::Loss | Method::Rank | Method::Logrank | Method::MinK | Method::Lastde => &[],
            Method::Entropy => &[Field::Mu],
            Method::Lrt | Method::Reference => &[Field::RefLogp],
            Method::Zlib => &[Field::TextB64],
            Method::Dcpdd => &[Field::FreqLogp],
            Method::Binoculars => &[Field::Ce],
            Method::Neighborhood | Method::Detectgpt | Method::DetectllmNpr => {
                &[Field::Perturbations]
            }
            Method::FastDetectgpt | Method::MinKPp => &[Field::Mu, Field::Sigma],
            Method::Recall => &[Field::CondLogp],
            Method::LastdePp => &[Field::Samples],
        }
    }

    fn uses_k(self) -> bool {
        matches!(self, Method::MinK | Method::MinKPp)
    }

    fn uses_entropy_params(self) -> bool {
        matches!(self, Method::Lastde | Method::LastdePp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::config(format!(
                    "unknown method `{s}`; valid methods: {}",
                    names.join(", ")
                ))
            })
    }
}

/// Method parameters. A field is `Some` only for methods that consume it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_percent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_s: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins_eps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales_tau: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    #[serde(default)]
    pub params: Params,
}

impl MethodSpec {
    /// The method with its default parameters.
    pub fn new(method: Method) -> Self {
        let mut params = Params::default();
        if method.uses_k() {
            params.k_percent = Some(DEFAULT_K_PERCENT);
        }
        if method.uses_entropy_params() {
            params.window_s = Some(DEFAULT_WINDOW);
            params.bins_eps = Some(DEFAULT_BINS);
            params.scales_tau = Some(DEFAULT_SCALES);
        }
        MethodSpec { method, params }
    }

    /// Every method with default parameters, in canonical order.
    pub fn all_defaults() -> Vec<MethodSpec> {
        Method::ALL.iter().map(|&m| MethodSpec::new(m)).collect()
    }

    /// Fill unset parameters from the defaults, then validate.
    pub fn with_defaults(method: Method, overrides: Params) -> Result<Self> {
        let base = MethodSpec::new(method).params;
        let spec = MethodSpec {
            method,
            params: Params {
                k_percent: overrides.k_percent.or(base.k_percent),
                window_s: overrides.window_s.or(base.window_s),
                bins_eps: overrides.bins_eps.or(base.bins_eps),
                scales_tau: overrides.scales_tau.or(base.scales_tau),
                n_samples: overrides.n_samples.or(base.n_samples),
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.method;
        let p = &self.params;
        let reject =
            |name: &str| Error::config(format!("method {m} does not take parameter {name}"));
        if m.uses_k() {
            match p.k_percent {
                Some(k) if k > 0.0 && k <= 100.0 => {}
                Some(k) => {
                    return Err(Error::config(format!(
                        "{m}: k_percent {k} outside (0, 100]"
                    )))
                }
                None => return Err(Error::config(format!("{m}: missing k_percent"))),
            }
        } else if p.k_percent.is_some() {
            return Err(reject("k_percent"));
        }
        if m.uses_entropy_params() {
            let (s, e, t) = (p.window_s, p.bins_eps, p.scales_tau);
            match (s, e, t) {
                (Some(s), Some(e), Some(t)) => {
                    if s < 2 {
                        return Err(Error::config(format!(
                            "{m}: window_s must be >= 2, got {s}"
                        )));
                    }
                    if e < 2 {
                        return Err(Error::config(format!(
                            "{m}: bins_eps must be >= 2, got {e}"
                        )));
                    }
                    if t < 1 {
                        return Err(Error::config(format!("{m}: scales_tau must be >= 1")));
                    }
                }
                _ => {
                    return Err(Error::config(format!(
                        "{m}: missing window_s/bins_eps/scales_tau"
                    )))
                }
            }
        } else {
            if p.window_s.is_some() {
                return Err(reject("window_s"));
            }
            if p.bins_eps.is_some() {
                return Err(reject("bins_eps"));
            }
            if p.scales_tau.is_some() {
                return Err(reject("scales_tau"));
            }
        }
        match p.n_samples {
            Some(_) if m != Method::LastdePp => return Err(reject("n_samples")),
            Some(n) if n < 2 => {
                return Err(Error::config(format!(
                    "{m}: n_samples must be >= 2, got {n}"
                )))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn k_percent(&self) -> f64 {
        self.params.k_percent.unwrap_or(DEFAULT_K_PERCENT)
    }

    pub fn entropy_params(&self) -> (usize, usize, usize) {
        (
            self.params.window_s.unwrap_or(DEFAULT_WINDOW),
            self.params.bins_eps.unwrap_or(DEFAULT_BINS),
            self.params.scales_tau.unwrap_or(DEFAULT_SCALES),
        )
    }

    /// `k_percent=20` style rendering, `;`-separated, empty when there are none.
    pub fn params_string(&self) -> String {
        let p = &self.params;
        let mut parts = Vec::new();
        if let Some(k) = p.k_percent {
            parts.push(format!("k_percent={k}"));
        }
        if let Some(s) = p.window_s {
            parts.push(format!("window_s={s}"));
        }
        if let Some(e) = p.bins_eps {
            parts.push(format!("bins_eps={e}"));
        }
        if let Some(t) = p.scales_tau {
            parts.push(format!("scales_tau={t}"));
        }
        if let Some(n) = p.n_samples {
            parts.push(format!("n_samples={n}"));
        }
        parts.join(";")
    }

    /// Stable identifier, e.g. `min_k(k_percent=20)` or `loss`.
    pub fn key(&self) -> String {
        let params = self.params_string();
        if params.is_empty() {
            self.method.name().to_string()
        } else {
            format!("{}({params})", self.method)
        }
    }

    /// Inverse of [`MethodSpec::key`] given the separate params column.
    pub fn parse(method: &str, params: &str) -> Result<Self> {
        let method: Method = method.parse()?;
        let mut p = Params::default();
        for part in params.split(';').filter(|s| !s.is_empty()) {
            let (name, value) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("malformed parameter `{part}`")))?;
            let bad = || Error::config(format!("bad value for {name}: `{value}`"));
            match name {
                "k_percent" => p.k_percent = Some(value.parse().map_err(|_| bad())?),
                "window_s" => p.window_s = Some(value.parse().map_err(|_| bad())?),
                "bins_eps" => p.bins_eps = Some(value.parse().map_err(|_| bad())?),
                "scales_tau" => p.scales_tau = Some(value.parse().map_err(|_| bad())?),
                "n_samples" => p.n_samples = Some(value.parse().map_err(|_| bad())?),
                _ => return Err(Error::config(format!("unknown parameter `{name}`"))),
            }
        }
        let spec = MethodSpec { method, params: p };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}
