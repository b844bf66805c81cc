//! Likelihood ratios approximated with an external reference: a second
//! model, a compressor, or a unigram frequency table.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use flate2::write::ZlibEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::method::Method;
use crate::traces::{DocumentTrace, Field};

use super::{field_values, mean};

/// DEFLATE level used for every zlib measurement.
pub const ZLIB_LEVEL: u32 = 6;

/// Laplace-smoothed unigram token frequencies of a reference corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    counts: HashMap<u32, u64>,
    total: u64,
    vocab_size: u32,
}

impl FrequencyTable {
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn count(&self, token_id: u32) -> u64 {
        self.counts.get(&token_id).copied().unwrap_or(0)
    }

    /// `ln((count(t) + 1) / (total + vocab_size))`.
    pub fn lookup_logp(&self, token_id: u32) -> f64 {
        let num = (self.count(token_id) + 1) as f64;
        let den = (self.total + u64::from(self.vocab_size)) as f64;
        (num / den).ln()
    }

    /// Fills `freq_logp` on every token of the trace and its perturbations.
    pub fn annotate(&self, t: &mut DocumentTrace) {
        let tokens = t
            .tokens
            .iter_mut()
            .chain(t.perturbations.iter_mut().flatten());
        for tok in tokens {
            tok.freq_logp = Some(self.lookup_logp(tok.token_id));
        }
    }

    /// Reads the `#vocab_size=<int>` header followed by `token_id<TAB>count` lines.
    pub fn read_tsv<R: BufRead>(source: R) -> Result<Self> {
        let mut lines = source.lines().enumerate();
        let vocab_size = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::Parse {
                    line: 1,
                    message: e.to_string(),
                })?;
                line.trim()
                    .strip_prefix("#vocab_size=")
                    .and_then(|v| v.parse::<u32>().ok())
                    .ok_or_else(|| Error::Parse {
                        line: 1,
                        message: format!("expected `#vocab_size=<int>`, got `{line}`"),
                    })?
            }
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "empty frequency file".into(),
                })
            }
        };
        let mut records = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed = line.split_once('\t').and_then(|(id, count)| {
                Some((
                    id.trim().parse::<u32>().ok()?,
                    count.trim().parse::<u64>().ok()?,
                ))
            });
            match parsed {
                Some(rec) => records.push(rec),
                None => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("expected `token_id<TAB>count`, got `{line}`"),
                    })
                }
            }
        }
        build_freq_table(records, vocab_size)
    }

    /// Writes the table in the format accepted by [`FrequencyTable::read_tsv`],
    /// token ids ascending.
    pub fn write_tsv<W: Write>(&self, mut sink: W) -> Result<()> {
        let io = |e| Error::io("writing frequency table", e);
        writeln!(sink, "#vocab_size={}", self.vocab_size).map_err(io)?;
        let mut ids: Vec<_> = self.counts.iter().collect();
        ids.sort_unstable();
        for (id, count) in ids {
            writeln!(sink, "{id}\t{count}").map_err(io)?;
        }
        Ok(())
    }
}

pub fn build_freq_table(
    records: impl IntoIterator<Item = (u32, u64)>,
    vocab_size: u32,
) -> Result<FrequencyTable> {
    if vocab_size < 1 {
        return Err(Error::data("vocab_size must be >= 1"));
    }
    let mut counts = HashMap::new();
    let mut total = 0u64;
    for (token_id, count) in records {
        if token_id >= vocab_size {
            return Err(Error::data(format!(
                "token_id {token_id} outside vocabulary of size {vocab_size}"
            )));
        }
        if counts.insert(token_id, count).is_some() {
            return Err(Error::data(format!(
                "duplicate token_id {token_id} in frequency counts"
            )));
        }
        total += count;
    }
    Ok(FrequencyTable {
        counts,
        total,
        vocab_size,
    })
}

/// Size in bits of the zlib stream (DEFLATE level 6) of `text`.
pub fn zlib_entropy(text: &[u8]) -> Result<f64> {
    if text.is_empty() {
        return Err(Error::data("zlib entropy of empty text"));
    }
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(ZLIB_LEVEL));
    enc.write_all(text)
        .map_err(|e| Error::io("compressing text", e))?;
    let compressed = enc.finish().map_err(|e| Error::io("compressing text", e))?;
    Ok(8.0 * compressed.len() as f64)
}

/// Mean log-probability gap between the target and the reference model.
pub fn score_reference(t: &DocumentTrace) -> Result<f64> {
    let refs = field_values(&t.tokens, Method::Reference, Field::RefLogp)?;
    Ok(mean(t.tokens.iter().zip(refs).map(|(tok, r)| tok.logp - r)))
}

/// Negated total NLL over the compressed size of the raw text.
pub fn score_zlib(t: &DocumentTrace) -> Result<f64> {
    let text = t.text_bytes.as_deref().ok_or(Error::Unsupported {
        method: Method::Zlib,
        field: Field::TextB64.name(),
    })?;
    let bits = zlib_entropy(text)?;
    let total_nll: f64 = -t.logps().sum::<f64>();
    Ok(-(total_nll / bits))
}

/// `-(1/n) Σ p(x_i) · log q(x_i)` with `q` the smoothed corpus frequency.
pub fn score_dcpdd(t: &DocumentTrace) -> Result<f64> {
    let freq = field_values(&t.tokens, Method::Dcpdd, Field::FreqLogp)?;
    Ok(-mean(
        t.tokens.iter().zip(freq).map(|(tok, f)| tok.logp.exp() * f),
    ))
}

/// Negated ratio of the target NLL to the cross-model cross-entropy.
pub fn score_binoculars(t: &DocumentTrace) -> Result<f64> {
    let ce = field_values(&t.tokens, Method::Binoculars, Field::Ce)?;
    let ce_total: f64 = ce.iter().sum();
    if ce_total <= 0.0 {
        return Err(Error::DegenerateDenominator {
            method: Method::Binoculars,
            what: "cross-entropy sums to zero",
        });
    }
    let nll_total: f64 = -t.logps().sum::<f64>();
    Ok(-(nll_total / ce_total))
}
