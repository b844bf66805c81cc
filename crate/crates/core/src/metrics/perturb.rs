//! Likelihood ratios approximated by sampling neighbouring texts.

use crate::error::{Error, Result};
use crate::method::Method;
use crate::traces::{DocumentTrace, Field, TokenObservation};

use super::{field_values, mean, mean_log_rank, mean_nll};

/// Mean of per-sibling statistics, summed in sorted order so the result
/// does not depend on the order siblings are stored in.
fn order_free_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    mean(values)
}

fn sibling_mean(
    t: &DocumentTrace,
    method: Method,
    stat: impl Fn(&[TokenObservation]) -> f64,
) -> Result<f64> {
    if t.perturbations.is_empty() {
        return Err(Error::Unsupported {
            method,
            field: Field::Perturbations.name(),
        });
    }
    if t.perturbations.iter().any(Vec::is_empty) {
        return Err(Error::data(format!(
            "document {} has an empty perturbation",
            t.doc_id
        )));
    }
    Ok(order_free_mean(
        t.perturbations.iter().map(|p| stat(p)).collect(),
    ))
}

/// Mean NLL of the perturbations minus the NLL of the document.
pub fn score_neighborhood(t: &DocumentTrace) -> Result<f64> {
    let neighbours = sibling_mean(t, Method::Neighborhood, mean_nll)?;
    Ok(neighbours - mean_nll(&t.tokens))
}

/// The same statistic as [`score_neighborhood`].
pub fn score_detectgpt(t: &DocumentTrace) -> Result<f64> {
    score_neighborhood(t).map_err(|e| match e {
        Error::Unsupported { field, .. } => Error::Unsupported {
            method: Method::Detectgpt,
            field,
        },
        other => other,
    })
}

/// Analytic conditional-sampling discrepancy:
/// `Σ (logp_i - mu_i) / sqrt(Σ sigma_i²)`.
pub fn score_fast_detectgpt(t: &DocumentTrace) -> Result<f64> {
    let mu = field_values(&t.tokens, Method::FastDetectgpt, Field::Mu)?;
    let sigma = field_values(&t.tokens, Method::FastDetectgpt, Field::Sigma)?;
    let variance: f64 = sigma.iter().map(|s| s * s).sum();
    if variance <= 0.0 {
        return Err(Error::DegenerateDenominator {
            method: Method::FastDetectgpt,
            what: "all sigma are zero",
        });
    }
    let gap: f64 = t.tokens.iter().zip(&mu).map(|(tok, m)| tok.logp - m).sum();
    Ok(gap / variance.sqrt())
}

/// Mean log-rank of the perturbations over the log-rank of the document.
pub fn score_detectllm_npr(t: &DocumentTrace) -> Result<f64> {
    let own = mean_log_rank(&t.tokens);
    let neighbours = sibling_mean(t, Method::DetectllmNpr, mean_log_rank)?;
    if own <= 0.0 {
        return Err(Error::DegenerateDenominator {
            method: Method::DetectllmNpr,
            what: "every token has rank 1",
        });
    }
    Ok(neighbours / own)
}

/// Negated ratio of the prefix-conditioned NLL to the unconditional NLL.
pub fn score_recall(t: &DocumentTrace) -> Result<f64> {
    let cond = field_values(&t.tokens, Method::Recall, Field::CondLogp)?;
    let nll = mean_nll(&t.tokens);
    if nll <= 0.0 {
        return Err(Error::DegenerateDenominator {
            method: Method::Recall,
            what: "NLL is zero",
        });
    }
    Ok(-(-mean(cond) / nll))
}
