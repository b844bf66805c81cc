//! Likelihood against multiscale diversity entropy of the log-probability
//! series.
//!
//! Diversity entropy at scale `tau`:
//! 1. coarse-grain the series into non-overlapping means of `tau` values
//!    (a trailing partial block is dropped);
//! 2. take every overlapping window of length `s`;
//! 3. compute the cosine similarity of each pair of consecutive windows
//!    (a zero-norm window counts as similarity 1);
//! 4. histogram the similarities into `eps` equal-width bins over `[-1, 1]`,
//!    the last bin closed;
//! 5. return the Shannon entropy of the bin fractions divided by `ln eps`.

use crate::error::{Error, Result};
use crate::method::Method;
use crate::traces::{DocumentTrace, Field};

use super::{mean, mean_std};

/// Lower bound applied to the diversity-entropy spread.
pub const STD_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LastdeScore {
    pub value: f64,
    pub std_floored: bool,
}

fn check_params(s: usize, eps: usize, tau: usize) -> Result<()> {
    if s < 2 || eps < 2 || tau < 1 {
        return Err(Error::config(format!(
            "diversity entropy needs s >= 2, eps >= 2, tau >= 1 (got {s}, {eps}, {tau})"
        )));
    }
    Ok(())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

fn bin_index(similarity: f64, eps: usize) -> usize {
    let idx = ((similarity + 1.0) / 2.0 * eps as f64).floor() as usize;
    idx.min(eps - 1)
}

/// Normalized diversity entropy of `series` at scale `tau`, in `[0, 1]`.
pub fn diversity_entropy(series: &[f64], s: usize, eps: usize, tau: usize) -> Result<f64> {
    check_params(s, eps, tau)?;
    let coarse: Vec<f64> = series
        .chunks_exact(tau)
        .map(|c| mean(c.iter().copied()))
        .collect();
    if coarse.len() < s + 1 {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            window: s,
            scale: tau,
        });
    }
    let windows: Vec<&[f64]> = coarse.windows(s).collect();
    let mut counts = vec![0usize; eps];
    for pair in windows.windows(2) {
        counts[bin_index(cosine(pair[0], pair[1]), eps)] += 1;
    }
    let total = (windows.len() - 1) as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    let normalized = entropy / (eps as f64).ln();
    // A single occupied bin sums to -0.0; report it as 0.
    Ok(if normalized > 0.0 {
        normalized.min(1.0)
    } else {
        0.0
    })
}

/// Shortest series for which every scale `1..=tau_max` is defined.
pub fn min_series_len(s: usize, tau_max: usize) -> usize {
    (s + 1) * tau_max
}

/// `-(nll / spread)` with the spread floored at [`STD_FLOOR`].
pub(crate) fn lastde_ratio(nll: f64, entropies: &[f64]) -> LastdeScore {
    let (_, spread) = mean_std(entropies);
    if spread <= STD_FLOOR {
        LastdeScore {
            value: -(nll / STD_FLOOR),
            std_floored: true,
        }
    } else {
        LastdeScore {
            value: -(nll / spread),
            std_floored: false,
        }
    }
}

fn lastde_of_series(series: &[f64], s: usize, eps: usize, tau_max: usize) -> Result<LastdeScore> {
    check_params(s, eps, tau_max)?;
    let entropies = (1..=tau_max)
        .map(|tau| diversity_entropy(series, s, eps, tau))
        .collect::<Result<Vec<_>>>()?;
    let nll = -mean(series.iter().copied());
    Ok(lastde_ratio(nll, &entropies))
}

/// Negated mean NLL over the population spread of diversity entropy across
/// scales `1..=tau_max`.
pub fn score_lastde(
    t: &DocumentTrace,
    s: usize,
    eps: usize,
    tau_max: usize,
) -> Result<LastdeScore> {
    let series: Vec<f64> = t.logps().collect();
    lastde_of_series(&series, s, eps, tau_max)
}

/// Lastde of the document standardized against the Lastde values of its
/// sampled sequences. Uses the first `n_samples` samples when given.
pub fn score_lastde_pp(
    t: &DocumentTrace,
    s: usize,
    eps: usize,
    tau_max: usize,
    n_samples: Option<usize>,
) -> Result<f64> {
    let take = n_samples.unwrap_or(t.samples.len()).min(t.samples.len());
    if take < 2 {
        return Err(Error::Unsupported {
            method: Method::LastdePp,
            field: Field::Samples.name(),
        });
    }
    let own = score_lastde(t, s, eps, tau_max)?.value;
    let mut values = Vec::with_capacity(take);
    for sample in &t.samples[..take] {
        if sample.len() != t.tokens.len() {
            return Err(Error::data(format!(
                "document {}: sample length {} differs from {} tokens",
                t.doc_id,
                sample.len(),
                t.tokens.len()
            )));
        }
        values.push(lastde_of_series(sample, s, eps, tau_max)?.value);
    }
    values.sort_by(f64::total_cmp);
    let (centre, spread) = mean_std(&values);
    if spread <= 1e-12 * centre.abs().max(1.0) {
        return Err(Error::DegenerateDenominator {
            method: Method::LastdePp,
            what: "sampled Lastde values have zero spread",
        });
    }
    Ok((own - centre) / spread)
}
