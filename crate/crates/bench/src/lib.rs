//! Shared fixtures for the benchmarks.

use mint_core::{gen_traceset, DocumentTrace, SynthConfig, Task};

/// A fixed synthetic trace set with every field populated.
pub fn fixture(n_docs_per_class: usize, n_tokens: usize) -> Vec<DocumentTrace> {
    let mut cfg = SynthConfig::new(n_docs_per_class, n_tokens, (-3.0, 1.0), (-2.5, 1.0), 1);
    cfg.task = Task::Mia;
    gen_traceset(&cfg).expect("valid fixture config").traces
}

/// Scores with many ties, split into two classes.
pub fn tied_scores(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pos = (0..n)
        .map(|i| ((i * 7919) % 1000) as f64 / 10.0 + 5.0)
        .collect();
    let neg = (0..n)
        .map(|i| ((i * 104_729) % 1000) as f64 / 10.0)
        .collect();
    (pos, neg)
}
