//! Baseline and token-selective likelihood metrics.

use crate::error::{Error, Result};
use crate::method::Method;
use crate::traces::{DocumentTrace, Field};

use super::{field_values, mean, mean_log_rank, mean_nll};

/// Magnitude of a standardized score at a position whose distribution has zero spread.
pub const Z_CAP: f64 = 1e6;

/// Mean log-probability of the observed tokens.
pub fn score_loss(t: &DocumentTrace) -> f64 {
    mean(t.logps())
}

/// Negated mean token rank.
pub fn score_rank(t: &DocumentTrace) -> f64 {
    -mean(t.tokens.iter().map(|tok| f64::from(tok.rank)))
}

/// Negated mean ln(rank).
pub fn score_logrank(t: &DocumentTrace) -> f64 {
    -mean_log_rank(&t.tokens)
}

/// Mean expected log-probability, i.e. negated mean positional entropy.
pub fn score_entropy(t: &DocumentTrace) -> Result<f64> {
    let mu = field_values(&t.tokens, Method::Entropy, Field::Mu)?;
    Ok(mean(mu))
}

/// Negated ratio of the target NLL to the reference NLL.
pub fn score_lrt(t: &DocumentTrace) -> Result<f64> {
    let reference = field_values(&t.tokens, Method::Lrt, Field::RefLogp)?;
    let ref_nll = -mean(reference);
    if ref_nll <= 0.0 {
        return Err(Error::DegenerateDenominator {
            method: Method::Lrt,
            what: "reference NLL is zero",
        });
    }
    Ok(-(mean_nll(&t.tokens) / ref_nll))
}

/// Number of positions selected by a min-k% rule.
pub(crate) fn selection_size(n: usize, k_percent: f64) -> usize {
    let m = (n as f64 * k_percent / 100.0).floor() as usize;
    m.clamp(1, n.max(1))
}

/// Mean of the `m` smallest values, ties broken by earliest position. The
/// selected values are summed in position order so that selecting every
/// position reproduces the plain mean bit for bit.
fn mean_of_smallest(values: &[f64], k_percent: f64) -> f64 {
    let m = selection_size(values.len(), k_percent);
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut selected = vec![false; values.len()];
    for &i in &order[..m] {
        selected[i] = true;
    }
    mean(
        values
            .iter()
            .zip(&selected)
            .filter(|(_, &s)| s)
            .map(|(&v, _)| v),
    )
}

/// Mean log-probability of the k% least likely tokens.
pub fn score_min_k(t: &DocumentTrace, k_percent: f64) -> f64 {
    let logps: Vec<f64> = t.logps().collect();
    mean_of_smallest(&logps, k_percent)
}

fn standardize(logp: f64, mu: f64, sigma: f64) -> f64 {
    if sigma > 0.0 {
        (logp - mu) / sigma
    } else if logp == mu {
        0.0
    } else {
        (logp - mu).signum() * Z_CAP
    }
}

/// Mean of the k% smallest standardized log-probabilities `(logp - mu) / sigma`.
pub fn score_min_k_pp(t: &DocumentTrace, k_percent: f64) -> Result<f64> {
    let mu = field_values(&t.tokens, Method::MinKPp, Field::Mu)?;
    let sigma = field_values(&t.tokens, Method::MinKPp, Field::Sigma)?;
    let z: Vec<f64> = t
        .tokens
        .iter()
        .zip(mu.iter().zip(&sigma))
        .map(|(tok, (&m, &s))| standardize(tok.logp, m, s))
        .collect();
    Ok(mean_of_smallest(&z, k_percent))
}

#[cfg(test)]
mod tests {
    use super::super::testutil::trace_from_logps;
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn with_ranks(ranks: &[u32]) -> DocumentTrace {
        let mut t = trace_from_logps(&vec![-1.0; ranks.len()]);
        for (tok, &r) in t.tokens.iter_mut().zip(ranks) {
            tok.rank = r;
        }
        t
    }

    fn with_moments(rows: &[(f64, f64, f64)]) -> DocumentTrace {
        let mut t = trace_from_logps(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
        for (tok, &(_, mu, sigma)) in t.tokens.iter_mut().zip(rows) {
            tok.mu = Some(mu);
            tok.sigma = Some(sigma);
        }
        t
    }

    #[test]
    fn loss_is_the_mean_logp() {
        assert_eq!(score_loss(&trace_from_logps(&[-1.0, -2.0, -3.0])), -2.0);
        assert_eq!(score_loss(&trace_from_logps(&[0.0])), 0.0);
    }

    #[test]
    fn rank_and_logrank() {
        assert_eq!(score_rank(&with_ranks(&[1, 1, 1])), -1.0);
        assert_eq!(score_rank(&with_ranks(&[1, 3])), -2.0);
        assert_eq!(score_rank(&with_ranks(&[5, 10, 15])), -10.0);
        assert_eq!(score_logrank(&with_ranks(&[1, 1])), 0.0);
        assert_abs_diff_eq!(
            score_logrank(&with_ranks(&[1, 7])),
            -0.972955,
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            score_logrank(&with_ranks(&[2, 2, 2])),
            -std::f64::consts::LN_2,
            epsilon = 1e-6
        );
    }

    #[test]
    fn entropy_needs_mu() {
        let mut t = trace_from_logps(&[-1.0, -1.0]);
        assert_eq!(
            score_entropy(&t).unwrap_err().to_string(),
            "entropy requires field mu"
        );
        t.tokens[0].mu = Some(-1.0);
        t.tokens[1].mu = Some(-3.0);
        assert_eq!(score_entropy(&t).unwrap(), -2.0);
        let mut one_hot = trace_from_logps(&[0.0]);
        one_hot.tokens[0].mu = Some(0.0);
        assert_eq!(score_entropy(&one_hot).unwrap(), 0.0);
    }

    fn with_ref(logps: &[f64], refs: &[f64]) -> DocumentTrace {
        let mut t = trace_from_logps(logps);
        for (tok, &r) in t.tokens.iter_mut().zip(refs) {
            tok.ref_logp = Some(r);
        }
        t
    }

    #[test]
    fn lrt_ratio() {
        assert_eq!(
            score_lrt(&with_ref(&[-0.5, -2.5], &[-0.5, -2.5])).unwrap(),
            -1.0
        );
        assert_eq!(
            score_lrt(&with_ref(&[-1.0, -1.0], &[-2.0, -2.0])).unwrap(),
            -0.5
        );
        assert_eq!(
            score_lrt(&with_ref(&[-2.0, -2.0], &[-1.0, -1.0])).unwrap(),
            -2.0
        );
        assert!(matches!(
            score_lrt(&with_ref(&[-2.0], &[0.0])),
            Err(Error::DegenerateDenominator { .. })
        ));
    }

    #[test]
    fn min_k_examples() {
        let t = trace_from_logps(&[-1.0, -2.0, -3.0, -4.0]);
        assert_eq!(score_min_k(&t, 50.0), -3.5);
        assert_eq!(score_min_k(&t, 100.0), score_loss(&t));
        assert_eq!(score_min_k(&trace_from_logps(&[-1.0]), 20.0), -1.0);
        assert_eq!(selection_size(3, 67.0), 2);
        assert_eq!(selection_size(10, 5.0), 1);
    }

    #[test]
    fn min_k_ties_take_the_earliest_position() {
        let values = [-2.0, -1.0, -2.0, -2.0];
        // m = 2 of three tied minima: positions 0 and 2.
        assert_eq!(mean_of_smallest(&values, 50.0), -2.0);
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        assert_eq!(&order[..2], &[0, 2]);
    }

    #[test]
    fn min_k_pp_examples() {
        let t = with_moments(&[(-2.0, -3.0, 1.0), (-5.0, -3.0, 2.0), (-1.0, -2.0, 0.5)]);
        assert_eq!(score_min_k_pp(&t, 67.0).unwrap(), 0.0);
        assert_abs_diff_eq!(
            score_min_k_pp(&t, 100.0).unwrap(),
            2.0 / 3.0,
            epsilon = 1e-15
        );
        let flat = with_moments(&[(-2.0, -2.0, 1.0), (-4.0, -4.0, 3.0)]);
        for k in [1.0, 50.0, 100.0] {
            assert_eq!(score_min_k_pp(&flat, k).unwrap(), 0.0);
        }
    }

    #[test]
    fn min_k_pp_zero_sigma_is_capped() {
        let t = with_moments(&[(-1.0, -2.0, 0.0), (-3.0, -3.0, 0.0), (-4.0, -3.0, 0.0)]);
        assert_eq!(score_min_k_pp(&t, 34.0).unwrap(), -Z_CAP);
        assert_eq!(score_min_k_pp(&t, 100.0).unwrap(), 0.0);
        assert!(score_min_k_pp(&trace_from_logps(&[-1.0]), 20.0).is_err());
    }

    fn logps_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-20.0f64..0.0, 1..64)
    }

    proptest! {
        #[test]
        fn min_k_full_selection_is_loss(logps in logps_strategy()) {
            let t = trace_from_logps(&logps);
            prop_assert_eq!(score_min_k(&t, 100.0), score_loss(&t));
        }

        #[test]
        fn shifting_logps_up_raises_loss_and_min_k(logps in logps_strategy(), c in 0.01f64..5.0, k in 1.0f64..100.0) {
            let t = trace_from_logps(&logps);
            let mut up = t.clone();
            for tok in &mut up.tokens { tok.logp += c; }
            prop_assert!(score_loss(&up) > score_loss(&t));
            prop_assert!(score_min_k(&up, k) > score_min_k(&t, k));
            prop_assert_eq!(score_rank(&up), score_rank(&t));
        }

        #[test]
        fn min_k_is_monotone_in_pointwise_improvement(
            pairs in prop::collection::vec((-20.0f64..0.0, 0.0f64..3.0), 1..64),
            k in 1.0f64..100.0,
        ) {
            let old: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let new: Vec<f64> = pairs.iter().map(|p| (p.0 + p.1).min(0.0)).collect();
            let a = score_min_k(&trace_from_logps(&old), k);
            let b = score_min_k(&trace_from_logps(&new), k);
            prop_assert!(b >= a - 1e-12, "{} < {}", b, a);
        }

        #[test]
        fn min_k_permutation_invariant_for_distinct_logps(
            logps in prop::collection::hash_set(-2000i32..0, 1..40),
            k in 1.0f64..100.0,
            seed in any::<u64>(),
        ) {
            let logps: Vec<f64> = logps.into_iter().map(|v| f64::from(v) / 100.0).collect();
            let mut shuffled = logps.clone();
            let len = shuffled.len();
            let mut state = seed;
            for i in (1..len).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (state >> 33) as usize % (i + 1));
            }
            let a = score_min_k(&trace_from_logps(&logps), k);
            let b = score_min_k(&trace_from_logps(&shuffled), k);
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn min_k_pp_is_affine_invariant(
            rows in prop::collection::vec((-20.0f64..0.0, -20.0f64..0.0, 0.05f64..5.0), 1..40),
            a in 0.1f64..10.0,
            b in -5.0f64..0.0,
            k in 1.0f64..100.0,
        ) {
            let t = with_moments(&rows);
            let scaled: Vec<(f64, f64, f64)> =
                rows.iter().map(|&(l, m, s)| (a * l + b, a * m + b, a * s)).collect();
            let u = with_moments(&scaled);
            let x = score_min_k_pp(&t, k).unwrap();
            let y = score_min_k_pp(&u, k).unwrap();
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{} vs {}", x, y);
        }
    }
}
