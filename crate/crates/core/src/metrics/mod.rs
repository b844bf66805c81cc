//! Document scoring.
//!
//! Every score follows one orientation: a higher value means the document is
//! more likely H1 (a training member, or machine generated). Document
//! aggregates are per-token means unless a metric says otherwise.

pub mod lastde;
pub mod likelihood;
pub mod perturb;
pub mod reference;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::method::{Method, MethodSpec};
use crate::traces::{DocumentTrace, Field, TokenObservation};

pub use lastde::{diversity_entropy, score_lastde, score_lastde_pp, LastdeScore, STD_FLOOR};
pub use likelihood::{
    score_entropy, score_logrank, score_loss, score_lrt, score_min_k, score_min_k_pp, score_rank,
    Z_CAP,
};
pub use perturb::{
    score_detectgpt, score_detectllm_npr, score_fast_detectgpt, score_neighborhood, score_recall,
};
pub use reference::{
    build_freq_table, score_binoculars, score_dcpdd, score_reference, score_zlib, zlib_entropy,
    FrequencyTable,
};

/// Result of scoring one document with one method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub score: f64,
    /// Set when the Lastde diversity-entropy spread hit [`STD_FLOOR`].
    pub std_floored: bool,
}

impl From<f64> for Scored {
    fn from(score: f64) -> Self {
        Scored {
            score,
            std_floored: false,
        }
    }
}

/// One emitted score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub doc_id: String,
    pub method: MethodSpec,
    pub score: f64,
}

/// Scores `t` with `spec`, checking field support and finiteness first.
pub fn score(t: &DocumentTrace, spec: &MethodSpec) -> Result<Scored> {
    if t.tokens.is_empty() {
        return Err(Error::data(format!("document {} has no tokens", t.doc_id)));
    }
    for &field in spec.method.required_fields() {
        ensure_field(t, spec.method, field)?;
    }
    let (s, e, tau) = spec.entropy_params();
    let scored: Scored = match spec.method {
        Method::Loss => score_loss(t).into(),
        Method::Rank => score_rank(t).into(),
        Method::Logrank => score_logrank(t).into(),
        Method::Entropy => score_entropy(t)?.into(),
        Method::Lrt => score_lrt(t)?.into(),
        Method::Reference => score_reference(t)?.into(),
        Method::Zlib => score_zlib(t)?.into(),
        Method::Dcpdd => score_dcpdd(t)?.into(),
        Method::Binoculars => score_binoculars(t)?.into(),
        Method::Neighborhood => score_neighborhood(t)?.into(),
        Method::Detectgpt => score_detectgpt(t)?.into(),
        Method::FastDetectgpt => score_fast_detectgpt(t)?.into(),
        Method::DetectllmNpr => score_detectllm_npr(t)?.into(),
        Method::Recall => score_recall(t)?.into(),
        Method::MinK => score_min_k(t, spec.k_percent()).into(),
        Method::MinKPp => score_min_k_pp(t, spec.k_percent())?.into(),
        Method::Lastde => {
            let l = score_lastde(t, s, e, tau)?;
            Scored {
                score: l.value,
                std_floored: l.std_floored,
            }
        }
        Method::LastdePp => score_lastde_pp(t, s, e, tau, spec.params.n_samples)?.into(),
    };
    if !scored.score.is_finite() {
        return Err(Error::NonFinite {
            doc_id: t.doc_id.clone(),
        });
    }
    Ok(scored)
}

fn ensure_field(t: &DocumentTrace, method: Method, field: Field) -> Result<()> {
    let present = match field {
        Field::TextB64 => t.text_bytes.is_some(),
        Field::Perturbations => !t.perturbations.is_empty(),
        Field::Samples => !t.samples.is_empty(),
        f => t.tokens.iter().all(|tok| tok.get(f).is_some()),
    };
    if present {
        Ok(())
    } else {
        Err(Error::Unsupported {
            method,
            field: field.name(),
        })
    }
}

/// Collects a token-level field, failing with an unsupported-method error.
pub(crate) fn field_values(
    tokens: &[TokenObservation],
    method: Method,
    field: Field,
) -> Result<Vec<f64>> {
    tokens
        .iter()
        .map(|tok| {
            tok.get(field).ok_or(Error::Unsupported {
                method,
                field: field.name(),
            })
        })
        .collect()
}

pub(crate) fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Per-token mean negative log-likelihood.
pub(crate) fn mean_nll(tokens: &[TokenObservation]) -> f64 {
    -mean(tokens.iter().map(|t| t.logp))
}

/// Per-token mean of ln(rank).
pub(crate) fn mean_log_rank(tokens: &[TokenObservation]) -> f64 {
    mean(tokens.iter().map(|t| f64::from(t.rank).ln()))
}

/// Population mean and standard deviation.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let m = mean(values.iter().copied());
    let var = mean(values.iter().map(|v| (v - m) * (v - m)));
    (m, var.sqrt())
}


#[cfg(test)]
mod tests {
    use super::testutil::trace_from_logps;
    use super::*;

    #[test]
    fn dispatch_names_missing_field() {
        let t = trace_from_logps(&[-1.0, -2.0]);
        let err = score(&t, &MethodSpec::new(Method::Binoculars)).unwrap_err();
        assert_eq!(err.to_string(), "binoculars requires field ce");
        let err = score(&t, &MethodSpec::new(Method::Entropy)).unwrap_err();
        assert_eq!(err.to_string(), "entropy requires field mu");
        let err = score(&t, &MethodSpec::new(Method::Zlib)).unwrap_err();
        assert_eq!(err.to_string(), "zlib requires field text_b64");
    }

    #[test]
    fn dispatch_rejects_empty_documents() {
        let t = trace_from_logps(&[]);
        assert!(score(&t, &MethodSpec::new(Method::Loss)).is_err());
    }

    #[test]
    fn dispatch_matches_direct_calls() {
        let t = trace_from_logps(&[-1.0, -2.0, -3.0, -4.0]);
        assert_eq!(
            score(&t, &MethodSpec::new(Method::Loss)).unwrap().score,
            -2.5
        );
        let mk = MethodSpec::with_defaults(
            Method::MinK,
            crate::method::Params {
                k_percent: Some(50.0),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(score(&t, &mk).unwrap().score, -3.5);
    }
}
