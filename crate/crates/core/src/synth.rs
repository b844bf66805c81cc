//! Synthetic trace sets with known ground truth.
//!
//! Documents alternate between class 0 (H0: non-member / human) and class 1
//! (H1: member / machine). Per-token log-probabilities are independent
//! Gaussian draws, which makes the AUROC of the mean-logp score available in
//! closed form ([`analytic_auroc_gaussian`]).
//!
//! Field laws for a class-`c` document, with `m = (mu_c + mu0) / 2` the
//! target model's positional expectation:
//!
//! | field          | law                                               |
//! |----------------|---------------------------------------------------|
//! | `logp`         | `min(0, N(mu_c, sd_c))`                           |
//! | `rank`         | `min(V, 1 + floor(exp(-logp)))`                   |
//! | `mu`, `sigma`  | `m`, `sd_c`                                       |
//! | `ref_logp`     | `min(0, N(mu0, sd0))`                             |
//! | `ce`           | `-m + 0.1`                                        |
//! | `cond_logp`    | `min(0, logp + (mu_c - mu0) / 2)`                 |
//! | `freq_logp`    | log of a fixed Zipf law over the vocabulary       |
//! | perturbations  | token traces drawn from the class-0 law           |
//! | samples        | `min(0, N(m, sd_c))` per position                 |
//!
//! Every class-dependent shift is proportional to `mu_c - mu0`, so equal
//! class parameters give indistinguishable populations.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::error::{Error, Result};
use crate::traces::{DocumentTrace, Task, TokenObservation, TraceSet};

const ZIPF_EXPONENT: f64 = 1.07;
const CE_OFFSET: f64 = 0.1;

fn default_task() -> Task {
    Task::Mia
}
fn default_domain() -> String {
    "synthetic".into()
}
fn default_model() -> String {
    "gaussian".into()
}
fn default_perturbations() -> usize {
    4
}
fn default_samples() -> usize {
    16
}
fn default_vocab() -> u32 {
    32_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default = "default_domain")]
    pub domain: String,
    #[serde(default = "default_model")]
    pub model_id: String,
    pub n_docs_per_class: usize,
    pub n_tokens: usize,
    pub mu0: f64,
    pub sd0: f64,
    pub mu1: f64,
    pub sd1: f64,
    pub seed: u64,
    #[serde(default = "default_perturbations")]
    pub n_perturbations: usize,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: u32,
}

impl SynthConfig {
    /// Defaults for everything except the two class laws.
    pub fn new(
        n_docs_per_class: usize,
        n_tokens: usize,
        class0: (f64, f64),
        class1: (f64, f64),
        seed: u64,
    ) -> Self {
        SynthConfig {
            task: default_task(),
            domain: default_domain(),
            model_id: default_model(),
            n_docs_per_class,
            n_tokens,
            mu0: class0.0,
            sd0: class0.1,
            mu1: class1.0,
            sd1: class1.1,
            seed,
            n_perturbations: default_perturbations(),
            n_samples: default_samples(),
            vocab_size: default_vocab(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(format!("synth: {msg}")));
        if !(self.sd0 > 0.0 && self.sd1 > 0.0 && self.sd0.is_finite() && self.sd1.is_finite()) {
            return bad(format!(
                "standard deviations must be positive, got {} and {}",
                self.sd0, self.sd1
            ));
        }
        if !(self.mu0 <= 0.0 && self.mu1 <= 0.0 && self.mu0.is_finite() && self.mu1.is_finite()) {
            return bad(format!(
                "class means must be <= 0, got {} and {}",
                self.mu0, self.mu1
            ));
        }
        if self.n_tokens < 4 {
            return bad(format!("n_tokens must be >= 4, got {}", self.n_tokens));
        }
        if self.n_docs_per_class < 1 {
            return bad("n_docs_per_class must be >= 1".into());
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be >= 2".into());
        }
        Ok(())
    }
}

/// Fixed Zipf law over the synthetic vocabulary.
struct Zipf {
    cumulative: Vec<f64>,
    log_prob: Vec<f64>,
}

impl Zipf {
    fn new(vocab: u32) -> Self {
        let weights: Vec<f64> = (0..vocab)
            .map(|t| (f64::from(t) + 1.0).powf(-ZIPF_EXPONENT))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        let log_prob = weights.iter().map(|w| (w / total).ln()).collect();
        Zipf {
            cumulative,
            log_prob,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> u32 {
        let u: f64 = rng.random();
        let idx = self.cumulative.partition_point(|&c| c < u);
        idx.min(self.cumulative.len() - 1) as u32
    }
}

fn word(mut id: u32, out: &mut Vec<u8>) {
    loop {
        out.push(b'a' + (id % 26) as u8);
        id /= 26;
        if id == 0 {
            break;
        }
    }
}

fn rank_of(logp: f64, vocab: u32) -> u32 {
    let r = 1.0 + (-logp).exp().floor();
    if r >= f64::from(vocab) {
        vocab
    } else {
        r as u32
    }
}

struct Laws {
    own: Normal<f64>,
    base: Normal<f64>,
    model: Normal<f64>,
}

fn gen_document(cfg: &SynthConfig, zipf: &Zipf, index: usize) -> DocumentTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let positive = index % 2 == 1;
    let (mu_c, sd_c) = if positive {
        (cfg.mu1, cfg.sd1)
    } else {
        (cfg.mu0, cfg.sd0)
    };
    let model_mu = 0.5 * (mu_c + cfg.mu0);
    let cond_offset = 0.5 * (mu_c - cfg.mu0);
    // Parameters were validated, so the laws are well formed.
    let laws = Laws {
        own: Normal::new(mu_c, sd_c).expect("validated"),
        base: Normal::new(cfg.mu0, cfg.sd0).expect("validated"),
        model: Normal::new(model_mu, sd_c).expect("validated"),
    };
    let draw = |law: &Normal<f64>, rng: &mut ChaCha8Rng| law.sample(rng).min(0.0);

    let mut text = Vec::with_capacity(cfg.n_tokens * 4);
    let mut tokens = Vec::with_capacity(cfg.n_tokens);
    for i in 0..cfg.n_tokens {
        let token_id = zipf.sample(&mut rng);
        let logp = draw(&laws.own, &mut rng);
        let ref_logp = draw(&laws.base, &mut rng);
        if i > 0 {
            text.push(b' ');
        }
        word(token_id, &mut text);
        tokens.push(TokenObservation {
            ce: Some(-model_mu + CE_OFFSET),
            cond_logp: Some((logp + cond_offset).min(0.0)),
            freq_logp: Some(zipf.log_prob[token_id as usize]),
            logp,
            mu: Some(model_mu),
            rank: rank_of(logp, cfg.vocab_size),
            ref_logp: Some(ref_logp),
            sigma: Some(sd_c),
            token_id,
        });
    }
    let perturbations = (0..cfg.n_perturbations)
        .map(|_| {
            (0..cfg.n_tokens)
                .map(|_| {
                    let token_id = zipf.sample(&mut rng);
                    let logp = draw(&laws.base, &mut rng);
                    let mut tok =
                        TokenObservation::new(token_id, logp, rank_of(logp, cfg.vocab_size));
                    tok.mu = Some(cfg.mu0);
                    tok.sigma = Some(cfg.sd0);
                    tok
                })
                .collect()
        })
        .collect();
    let samples = (0..cfg.n_samples)
        .map(|_| {
            (0..cfg.n_tokens)
                .map(|_| draw(&laws.model, &mut rng))
                .collect()
        })
        .collect();
    let (pos_label, neg_label) = cfg.task.labels();
    DocumentTrace {
        doc_id: format!("{}-{}-{index:06}", cfg.task, cfg.domain),
        domain: cfg.domain.clone(),
        label: if positive { pos_label } else { neg_label },
        model_id: cfg.model_id.clone(),
        perturbations,
        samples,
        text_bytes: Some(text),
        tokens,
    }
}

/// Generates `2 · n_docs_per_class` documents, classes interleaved. Each
/// document draws from its own ChaCha8 stream, so output is independent of
/// thread count.
pub fn gen_traceset(cfg: &SynthConfig) -> Result<TraceSet> {
    cfg.validate()?;
    let zipf = Zipf::new(cfg.vocab_size);
    let traces: Vec<DocumentTrace> = (0..2 * cfg.n_docs_per_class)
        .into_par_iter()
        .map(|i| gen_document(cfg, &zipf, i))
        .collect();
    let mut metadata = BTreeMap::new();
    metadata.insert("generator".to_string(), "mint-synth".to_string());
    metadata.insert("seed".to_string(), cfg.seed.to_string());
    metadata.insert("class0".to_string(), format!("N({}, {})", cfg.mu0, cfg.sd0));
    metadata.insert("class1".to_string(), format!("N({}, {})", cfg.mu1, cfg.sd1));
    Ok(TraceSet {
        task: cfg.task,
        traces,
        metadata,
    })
}

/// Exact AUROC of the mean-logp score for independent Gaussian tokens.
pub fn analytic_auroc_gaussian(mu0: f64, sd0: f64, mu1: f64, sd1: f64, n_tokens: usize) -> f64 {
    let n = n_tokens as f64;
    let z = (mu1 - mu0) / (sd0 * sd0 / n + sd1 * sd1 / n).sqrt();
    StdNormal::standard().cdf(z)
}

/// O(n·m) pair counting: (wins + ½ ties) / (|pos|·|neg|).
pub fn brute_force_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0u64;
    let mut ties = 0u64;
    for &p in pos {
        for &q in neg {
            if p > q {
                wins += 1;
            } else if p == q {
                ties += 1;
            }
        }
    }
    (wins as f64 + 0.5 * ties as f64) / (pos.len() as f64 * neg.len() as f64)
}
