//! Offline evaluation: ranking metrics and the pairwise scoring benchmark.
//!
//! ROC-AUC uses the rank-sum formulation with midranks, so ties count half
//! a win and the result is exactly the probability that a random positive
//! outscores a random negative. Negative PR-AUC inverts scores (1 − score)
//! and treats Bad as the detection target, summing average precision over
//! distinct-threshold blocks.

use serde::{Deserialize, Serialize};

use crate::scoring::ScoreMode;
use crate::{DeepBowError, Result};

/// Evaluation summary for one scored set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub roc_auc: f64,
    pub neg_pr_auc: f64,
    pub n: usize,
    pub n_good: usize,
    pub n_bad: usize,
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(DeepBowError::Input(format!(
            "{} scores against {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(DeepBowError::Input(format!(
            "labels must be 0 or 1, got {bad}"
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(DeepBowError::Input(format!("non-finite score {s}")));
    }
    Ok(())
}

/// Probability that a uniformly random Good example outscores a random Bad
/// one, ties counted ½ (rank-sum with midranks).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DeepBowError::UndefinedMetric(format!(
            "ROC-AUC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Midranks: every member of a tie block gets the block's average rank.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j average to (i + j + 1) / 2.
        let midrank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision of Bad-detection: scores are inverted (1 − score), Bad
/// (label 0) is the positive class, and precision/recall advance one
/// distinct-threshold block at a time.
pub fn neg_pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_bad = labels.iter().filter(|&&l| l == 0).count();
    if n_bad == 0 {
        return Err(DeepBowError::UndefinedMetric(
            "Neg PR-AUC needs at least one Bad example".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Descending by detection score 1 − s, i.e. ascending by s.
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ap = 0.0f64;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let block_tp = order[i..j].iter().filter(|&&idx| labels[idx] == 0).count();
        tp += block_tp;
        seen += j - i;
        if block_tp > 0 {
            let precision = tp as f64 / seen as f64;
            let recall_gain = block_tp as f64 / n_bad as f64;
            ap += recall_gain * precision;
        }
        i = j;
    }
    Ok(ap)
}

/// Convenience bundle of both metrics.
pub fn evaluate(scores: &[f64], labels: &[u8]) -> Result<EvalReport> {
    Ok(EvalReport {
        roc_auc: roc_auc(scores, labels)?,
        neg_pr_auc: neg_pr_auc(scores, labels)?,
        n: labels.len(),
        n_good: labels.iter().filter(|&&l| l == 1).count(),
        n_bad: labels.iter().filter(|&&l| l == 0).count(),
    })
}

/// Wall-clock statistics for scoring a fixed batch of pairs from
/// precomputed stores, all times in microseconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub pairs: usize,
    pub reps: usize,
    pub min_us: f64,
    pub mean_us: f64,
    pub p99_us: f64,
    /// Mean two-pointer cursor advances per pair — the work the linear
    /// intersection claim is about.
    pub adds_per_pair_mean: f64,
}

impl BenchReport {
    fn zero(pairs: usize, reps: usize) -> Self {
        BenchReport {
            pairs,
            reps,
            min_us: 0.0,
            mean_us: 0.0,
            p99_us: 0.0,
            adds_per_pair_mean: 0.0,
        }
    }
}

/// Times scoring of `pairs` (query id, product id) against pre-loaded
/// stores, single-threaded, encoding excluded. Each repetition scores the
/// whole batch once; min/mean/p99 summarize the per-repetition durations
/// (p99 by nearest rank). Missing ids fail up front.
pub fn bench_latency(
    queries: &crate::store::BoWStore,
    products: &crate::store::BoWStore,
    pairs: &[(String, String)],
    mode: ScoreMode,
    reps: usize,
) -> Result<BenchReport> {
    use crate::scoring::{intersect_dot_counted, score_q_synonym, score_q_weight};

    let mut resolved = Vec::with_capacity(pairs.len());
    for (qid, pid) in pairs {
        let q = queries
            .get(qid)
            .ok_or_else(|| DeepBowError::NotFound(format!("query id `{qid}` not in store")))?;
        let d = products
            .get(pid)
            .ok_or_else(|| DeepBowError::NotFound(format!("product id `{pid}` not in store")))?;
        resolved.push((q, d));
    }
    if resolved.is_empty() || reps == 0 {
        return Ok(BenchReport::zero(pairs.len(), reps));
    }

    let mut advances_total = 0usize;
    for &(q, d) in &resolved {
        advances_total += intersect_dot_counted(q, d).1;
    }

    let mut durations_us = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = std::time::Instant::now();
        match mode {
            ScoreMode::QWeight => {
                for &(q, d) in &resolved {
                    std::hint::black_box(score_q_weight(q, d)?);
                }
            }
            ScoreMode::QSynonym => {
                for &(q, d) in &resolved {
                    std::hint::black_box(score_q_synonym(q, d)?);
                }
            }
        }
        durations_us.push(start.elapsed().as_secs_f64() * 1e6);
    }
    durations_us.sort_by(|a, b| a.partial_cmp(b).expect("finite durations"));
    let rank = ((reps as f64 * 0.99).ceil() as usize).clamp(1, reps);
    Ok(BenchReport {
        pairs: pairs.len(),
        reps,
        min_us: durations_us[0],
        mean_us: durations_us.iter().sum::<f64>() / reps as f64,
        p99_us: durations_us[rank - 1],
        adds_per_pair_mean: advances_total as f64 / pairs.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roc_auc_closed_forms() {
        // Perfect separation.
        let auc = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(auc, 1.0);
        // All ties.
        let auc = roc_auc(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]).unwrap();
        assert_eq!(auc, 0.5);
        // Mixed: pairs (0.9>0.8)✓ (0.9>0.3)✓ (0.4<0.8)✗ (0.4>0.3)✓ → 3/4.
        let auc = roc_auc(&[0.9, 0.8, 0.4, 0.3], &[1, 0, 1, 0]).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn roc_auc_requires_both_classes() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(DeepBowError::UndefinedMetric(_))
        ));
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[0, 0]),
            Err(DeepBowError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn neg_pr_auc_closed_forms() {
        // All Bad below all Good by score → inverted, perfect detector.
        let ap = neg_pr_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(ap, 1.0);
        // Single Bad at inverted-rank position 2 of 4: precision there is
        // 1/2 and recall jumps 0→1, so AP = 0.5.
        let ap = neg_pr_auc(&[0.1, 0.2, 0.3, 0.4], &[1, 0, 1, 1]).unwrap();
        assert_eq!(ap, 0.5);
        // All Bad: precision is 1 at every threshold.
        let ap = neg_pr_auc(&[0.3, 0.9, 0.5], &[0, 0, 0]).unwrap();
        assert_eq!(ap, 1.0);
        // No Bad: undefined.
        assert!(matches!(
            neg_pr_auc(&[0.3, 0.9], &[1, 1]),
            Err(DeepBowError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn evaluate_bundles_counts() {
        let report = evaluate(&[0.9, 0.1, 0.8, 0.2], &[1, 0, 1, 0]).unwrap();
        assert_eq!(report.n, 4);
        assert_eq!(report.n_good, 2);
        assert_eq!(report.n_bad, 2);
        assert_eq!(report.roc_auc, 1.0);
        assert_eq!(report.neg_pr_auc, 1.0);
    }

    #[test]
    fn rejects_malformed_inputs() {
        assert!(roc_auc(&[0.1], &[1, 0]).is_err());
        assert!(roc_auc(&[0.1, f64::NAN], &[1, 0]).is_err());
        assert!(roc_auc(&[0.1, 0.2], &[1, 7]).is_err());
    }

    use crate::bow::SparseBoW;
    use crate::config::TruncationConfig;
    use crate::store::{BoWStore, Side, StoreMetadata};

    fn bench_store(side: Side, entries: &[(&str, &[(u32, f32)])]) -> BoWStore {
        let mut store = BoWStore::new(StoreMetadata {
            side,
            encoding: ScoreMode::QWeight,
            vocab_hash: "v".repeat(64),
            model_hash: "m".repeat(64),
            truncation: TruncationConfig::Topk { k: 128 },
            created_unix: 0,
            index_space: 100,
        });
        for &(id, postings) in entries {
            store.insert(id.into(), SparseBoW::new(postings.to_vec()).unwrap());
        }
        store
    }

    #[test]
    fn bench_reports_timings_and_intersection_work() {
        let queries = bench_store(
            Side::Query,
            &[("q1", &[(1, 0.5), (3, 0.5)]), ("q2", &[(2, 1.0)])],
        );
        let products = bench_store(
            Side::Product,
            &[("p1", &[(1, 0.9), (2, 0.8), (3, 0.7)]), ("p2", &[(9, 0.6)])],
        );
        let pairs = vec![
            ("q1".to_string(), "p1".to_string()),
            ("q2".to_string(), "p2".to_string()),
        ];
        let report = bench_latency(&queries, &products, &pairs, ScoreMode::QWeight, 20).unwrap();
        assert_eq!(report.pairs, 2);
        assert_eq!(report.reps, 20);
        assert!(report.min_us >= 0.0);
        assert!(report.mean_us >= report.min_us);
        assert!(report.p99_us >= report.min_us);
        // q1·p1 walks both lists fully with two matches: 2 double-advances
        // plus one single advance past the unmatched product entry → 5;
        // q2·p2 exhausts the query after one advance → 1. Mean (5 + 1) / 2.
        assert_eq!(report.adds_per_pair_mean, 3.0);
    }

    #[test]
    fn bench_missing_id_names_it() {
        let queries = bench_store(Side::Query, &[("q1", &[(1, 0.5)])]);
        let products = bench_store(Side::Product, &[("p1", &[(1, 0.9)])]);
        let pairs = vec![("q1".to_string(), "ghost".to_string())];
        match bench_latency(&queries, &products, &pairs, ScoreMode::QWeight, 1) {
            Err(DeepBowError::NotFound(msg)) => assert!(msg.contains("ghost"), "message: {msg}"),
            other => panic!("expected lookup error, got {other:?}"),
        }
    }

    #[test]
    fn bench_empty_pairs_is_zero_report() {
        let queries = bench_store(Side::Query, &[]);
        let products = bench_store(Side::Product, &[]);
        let report = bench_latency(&queries, &products, &[], ScoreMode::QSynonym, 5).unwrap();
        assert_eq!(report.pairs, 0);
        assert_eq!(report.min_us, 0.0);
        assert_eq!(report.p99_us, 0.0);
        assert_eq!(report.adds_per_pair_mean, 0.0);
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    /// O(n²) oracle: count wins and half-ties over all positive-negative
    /// pairs.
    fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0f64;
        let mut total = 0.0f64;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                total += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / total
    }

    /// O(n²) oracle for average precision over distinct-threshold blocks of
    /// the inverted score.
    fn brute_force_neg_pr(scores: &[f64], labels: &[u8]) -> f64 {
        let n_bad = labels.iter().filter(|&&l| l == 0).count() as f64;
        let mut detection: Vec<(f64, u8)> = scores
            .iter()
            .zip(labels)
            .map(|(&s, &l)| (1.0 - s, l))
            .collect();
        detection.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut ap = 0.0;
        let mut i = 0;
        while i < detection.len() {
            let mut j = i;
            while j < detection.len() && detection[j].0 == detection[i].0 {
                j += 1;
            }
            let tp_here = detection[i..j].iter().filter(|&&(_, l)| l == 0).count();
            if tp_here > 0 {
                let tp_total = detection[..j].iter().filter(|&&(_, l)| l == 0).count();
                ap += (tp_here as f64 / n_bad) * (tp_total as f64 / j as f64);
            }
            i = j;
        }
        ap
    }

    fn scored_set() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        proptest::collection::vec(((0u32..=20), (0u8..=1)), 2..200).prop_filter_map(
            "need both classes",
            |items| {
                let scores: Vec<f64> = items.iter().map(|&(s, _)| s as f64 / 20.0).collect();
                let labels: Vec<u8> = items.iter().map(|&(_, l)| l).collect();
                let pos = labels.iter().filter(|&&l| l == 1).count();
                (pos > 0 && pos < labels.len()).then_some((scores, labels))
            },
        )
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force((scores, labels) in scored_set()) {
            let fast = roc_auc(&scores, &labels).unwrap();
            let slow = brute_force_auc(&scores, &labels);
            prop_assert!((fast - slow).abs() < 1e-10);
            let pr = neg_pr_auc(&scores, &labels).unwrap();
            let pr_slow = brute_force_neg_pr(&scores, &labels);
            prop_assert!((pr - pr_slow).abs() < 1e-10);
        }

        #[test]
        fn auc_invariant_under_monotone_transform((scores, labels) in scored_set()) {
            let base = roc_auc(&scores, &labels).unwrap();
            let squashed: Vec<f64> = scores.iter().map(|&s| (3.0 * s + 1.0).tanh()).collect();
            let transformed = roc_auc(&squashed, &labels).unwrap();
            prop_assert!((base - transformed).abs() < 1e-10);
        }

        #[test]
        fn negating_scores_flips_auc((scores, labels) in scored_set()) {
            let base = roc_auc(&scores, &labels).unwrap();
            let negated: Vec<f64> = scores.iter().map(|&s| -s).collect();
            let flipped = roc_auc(&negated, &labels).unwrap();
            prop_assert!((base - (1.0 - flipped)).abs() < 1e-10);
        }
    }
}
