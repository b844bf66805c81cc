//! Task-agnostic evaluation statistics.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::method::{Family, MethodSpec};
use crate::traces::Task;

/// Exact permutation p-values are used up to this many observations.
pub const EXACT_PERMUTATION_MAX_N: usize = 8;
/// Redraws allowed per bootstrap iteration when a resample has one class.
pub const BOOTSTRAP_MAX_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub method: MethodSpec,
    pub task: Task,
    pub domain: String,
    pub model_id: String,
    pub auroc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub method: String,
    pub family: Family,
    pub mean_auroc_a: f64,
    pub mean_auroc_b: f64,
    pub rank_a: f64,
    pub rank_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// One row per method, sorted by method key.
    pub rows: Vec<TransferRow>,
    pub rho: f64,
    pub p_value: f64,
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::data(format!("non-finite score at {what}[{i}]"))),
        None => Ok(()),
    }
}

/// Twice the Mann-Whitney U of `pos` against `neg`: 2·wins + ties.
fn doubled_u(pos: &[f64], neg: &[f64]) -> u128 {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&v| (v, true))
        .chain(neg.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Walk tie groups; each positive beats every earlier negative and ties
    // with negatives in its own group.
    let mut negs_below: u128 = 0;
    let mut doubled: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let group = &all[i..j];
        let p = group.iter().filter(|x| x.1).count() as u128;
        let q = group.len() as u128 - p;
        doubled += p * (2 * negs_below + q);
        negs_below += q;
        i = j;
    }
    doubled
}

/// Tie-corrected Mann-Whitney AUROC: P(pos > neg) + ½ P(pos = neg).
///
/// Computed so that `auroc(a, b) + auroc(b, a) == 1.0` holds exactly.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::data(
            "auroc needs at least one positive and one negative score",
        ));
    }
    check_finite(pos, "pos")?;
    check_finite(neg, "neg")?;
    let pairs = 2 * pos.len() as u128 * neg.len() as u128;
    let up = doubled_u(pos, neg);
    let un = pairs - up;
    if up <= un {
        Ok(up as f64 / pairs as f64)
    } else {
        Ok(1.0 - un as f64 / pairs as f64)
    }
}

/// 1-based ranks, ties sharing the average of the positions they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Visits every permutation of `items` (Heap's algorithm, iterative).
fn for_each_permutation(items: &mut [f64], mut visit: impl FnMut(&[f64])) {
    let n = items.len();
    let mut c = vec![0usize; n];
    visit(items);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(c[i], i);
            }
            visit(items);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Spearman rank correlation with a two-sided p-value.
///
/// For `n <= 8` the p-value is exact: the share of all `n!` re-orderings of
/// the second rank vector whose |rho| reaches the observed |rho|. Larger
/// samples use the Student-t approximation with `n - 2` degrees of freedom.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::data(format!(
            "spearman: lengths differ ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::data("spearman needs at least 3 observations"));
    }
    check_finite(xs, "xs")?;
    check_finite(ys, "ys")?;
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let rho = pearson(&rx, &ry)
        .ok_or_else(|| Error::data("spearman: correlation undefined for a constant vector"))?;
    let n = xs.len();
    let p = if n <= EXACT_PERMUTATION_MAX_N {
        let threshold = rho.abs() - 1e-12;
        let (mut hits, mut total) = (0u64, 0u64);
        let mut perm = ry.clone();
        for_each_permutation(&mut perm, |p| {
            total += 1;
            if pearson(&rx, p).is_some_and(|r| r.abs() >= threshold) {
                hits += 1;
            }
        });
        hits as f64 / total as f64
    } else if rho.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::data(e.to_string()))?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok((rho, p))
}

/// Jensen-Shannon distance (natural log) between histograms of `a` and `b`.
///
/// Both samples are min-max normalized over their union and binned into
/// `bins` equal-width bins; the result lies in `[0, sqrt(ln 2)]`.
pub fn js_distance(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::data("js_distance needs two non-empty samples"));
    }
    if bins < 2 {
        return Err(Error::config(format!(
            "js_distance needs at least 2 bins, got {bins}"
        )));
    }
    check_finite(a, "a")?;
    check_finite(b, "b")?;
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(0.0);
    }
    let hist = |xs: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in xs {
            let u = (x - lo) / (hi - lo);
            let idx = ((u * bins as f64).floor() as usize).min(bins - 1);
            h[idx] += 1.0;
        }
        let n = xs.len() as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    };
    let (p, q) = (hist(a), hist(b));
    let kl_to_mid = |x: &[f64], y: &[f64]| -> f64 {
        x.iter()
            .zip(y)
            .filter(|(&xi, _)| xi > 0.0)
            .map(|(&xi, &yi)| xi * (xi / (0.5 * (xi + yi))).ln())
            .sum()
    };
    let divergence = 0.5 * kl_to_mid(&p, &q) + 0.5 * kl_to_mid(&q, &p);
    Ok(divergence.max(0.0).sqrt())
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval of the AUROC over document resampling.
///
/// Iteration `i` draws from a ChaCha8 stream seeded with `seed + i`, so the
/// interval does not depend on how iterations are scheduled. The interval is
/// widened, if needed, to contain the point estimate.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[bool],
    iters: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if iters < 100 {
        return Err(Error::config(format!(
            "bootstrap needs at least 100 iterations, got {iters}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::config(format!(
            "bootstrap level {level} outside (0, 1)"
        )));
    }
    if scores.len() != labels.len() {
        return Err(Error::data("bootstrap: scores and labels differ in length"));
    }
    let split = |idx: &mut dyn Iterator<Item = usize>| {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for i in idx {
            if labels[i] {
                pos.push(scores[i]);
            } else {
                neg.push(scores[i]);
            }
        }
        (pos, neg)
    };
    let (pos, neg) = split(&mut (0..scores.len()));
    let point = auroc(&pos, &neg)?;
    let n = scores.len();
    let mut stats = (0..iters)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            for _ in 0..BOOTSTRAP_MAX_RETRIES {
                let (p, q) = split(&mut (0..n).map(|_| rng.random_range(0..n)));
                if !p.is_empty() && !q.is_empty() {
                    return auroc(&p, &q);
                }
            }
            Err(Error::data(format!(
                "bootstrap iteration {i}: no two-class resample in {BOOTSTRAP_MAX_RETRIES} draws"
            )))
        })
        .collect::<Result<Vec<f64>>>()?;
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let low = quantile_sorted(&stats, tail).min(point);
    let high = quantile_sorted(&stats, 1.0 - tail).max(point);
    Ok((low, high))
}

/// Which cell of a result table a row belongs to.
pub type GroupKey = (Task, String, String);

fn group_key(r: &EvalResult) -> GroupKey {
    (r.task, r.domain.clone(), r.model_id.clone())
}

/// Ranks methods by AUROC (descending, average ties) inside every
/// (task, domain, model_id) group and returns each method's mean rank.
pub fn rank_methods(results: &[EvalResult]) -> Result<BTreeMap<String, f64>> {
    let mut groups: BTreeMap<GroupKey, BTreeMap<String, f64>> = BTreeMap::new();
    for r in results {
        let cell = groups.entry(group_key(r)).or_default();
        if cell.insert(r.method.key(), r.auroc).is_some() {
            return Err(Error::data(format!(
                "duplicate result for {} in group {}/{}/{}",
                r.method.key(),
                r.task,
                r.domain,
                r.model_id
            )));
        }
    }
    let methods: Vec<String> = {
        let mut all: Vec<String> = groups.values().flat_map(|g| g.keys().cloned()).collect();
        all.sort();
        all.dedup();
        all
    };
    let mut totals: BTreeMap<String, f64> = methods.iter().map(|m| (m.clone(), 0.0)).collect();
    for ((task, domain, model), cell) in &groups {
        if let Some(hole) = methods.iter().find(|m| !cell.contains_key(*m)) {
            return Err(Error::data(format!(
                "method {hole} missing from group {task}/{domain}/{model}"
            )));
        }
        let negated: Vec<f64> = methods.iter().map(|m| -cell[m]).collect();
        for (m, r) in methods.iter().zip(average_ranks(&negated)) {
            *totals.get_mut(m).unwrap() += r;
        }
    }
    let n_groups = groups.len() as f64;
    totals.values_mut().for_each(|v| *v /= n_groups);
    Ok(totals)
}

/// How per-task method orderings are formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingMode {
    /// Average AUROC across cells, then rank.
    #[default]
    MeanAuroc,
    /// Rank inside each cell, then average the ranks.
    MeanRank,
}

fn mean_auroc_per_method(results: &[EvalResult]) -> BTreeMap<String, (MethodSpec, f64)> {
    let mut acc: BTreeMap<String, (MethodSpec, f64, usize)> = BTreeMap::new();
    for r in results {
        let e = acc.entry(r.method.key()).or_insert((r.method, 0.0, 0));
        e.1 += r.auroc;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(k, (m, s, n))| (k, (m, s / n as f64)))
        .collect()
}

/// Cross-task rank agreement of the methods in two result tables.
pub fn transfer_report(
    results_a: &[EvalResult],
    results_b: &[EvalResult],
    mode: RankingMode,
) -> Result<TransferReport> {
    let mean_a = mean_auroc_per_method(results_a);
    let mean_b = mean_auroc_per_method(results_b);
    let only_a: Vec<&String> = mean_a.keys().filter(|k| !mean_b.contains_key(*k)).collect();
    let only_b: Vec<&String> = mean_b.keys().filter(|k| !mean_a.contains_key(*k)).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(Error::data(format!(
            "method sets differ: only in A {only_a:?}, only in B {only_b:?}"
        )));
    }
    let keys: Vec<&String> = mean_a.keys().collect();
    let (rank_a, rank_b) = match mode {
        RankingMode::MeanAuroc => {
            let neg_a: Vec<f64> = keys.iter().map(|k| -mean_a[*k].1).collect();
            let neg_b: Vec<f64> = keys.iter().map(|k| -mean_b[*k].1).collect();
            (average_ranks(&neg_a), average_ranks(&neg_b))
        }
        RankingMode::MeanRank => {
            let ra = rank_methods(results_a)?;
            let rb = rank_methods(results_b)?;
            (
                keys.iter().map(|k| ra[*k]).collect(),
                keys.iter().map(|k| rb[*k]).collect(),
            )
        }
    };
    let (rho, p_value) = spearman(&rank_a, &rank_b)?;
    let rows = keys
        .iter()
        .enumerate()
        .map(|(i, k)| TransferRow {
            method: (*k).clone(),
            family: mean_a[*k].0.method.family(),
            mean_auroc_a: mean_a[*k].1,
            mean_auroc_b: mean_b[*k].1,
            rank_a: rank_a[i],
            rank_b: rank_b[i],
        })
        .collect();
    Ok(TransferReport { rows, rho, p_value })
}
