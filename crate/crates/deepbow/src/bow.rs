//! Sparse bag-of-words representations and the heads that produce them.
//!
//! Two representations exist. The term-weighting BoW carries only the
//! input's own words, weighted by a softmax attention distribution that sums
//! to one — the query side of Q-Weight scoring. The synonym-expansion BoW is
//! dense over the whole index space: a character-view head scores every
//! vocabulary entry, a word-view head scores it again from the concatenated
//! character/word summary, and a scalar gate mixes the two at positions that
//! actually occur in the input (elsewhere the character view stands alone,
//! which is what lets absent synonyms surface). Serving never ships the
//! dense form — it is truncated to a sorted sparse vector first.

use std::collections::BTreeMap;

use crate::config::TruncationConfig;
use crate::encoder::attention_pool;
use crate::math::{self, Matrix};
use crate::params::{Init, ParamStore, TensorId};
use crate::vocab::TokenSequence;
use crate::{DeepBowError, Result};

/// Dense scores over the full index space, each in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBoW {
    pub weights: Vec<f64>,
}

impl DenseBoW {
    /// Euclidean norm of the dense vector (the sparsity term).
    pub fn l2_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Number of entries at or above `tau` (support under threshold
    /// truncation).
    pub fn support_at(&self, tau: f64) -> usize {
        self.weights.iter().filter(|&&w| w >= tau).count()
    }
}

/// Sorted sparse word-weight pairs; the serving and scoring currency.
///
/// Invariants: indices strictly ascending (no duplicates), every weight
/// strictly positive, every index inside the vocabulary's index space.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBoW {
    entries: Vec<(u32, f32)>,
}

impl SparseBoW {
    pub fn empty() -> Self {
        SparseBoW {
            entries: Vec::new(),
        }
    }

    /// Builds from pairs, enforcing the invariants.
    pub fn new(entries: Vec<(u32, f32)>) -> Result<Self> {
        let bow = SparseBoW { entries };
        bow.validate()?;
        Ok(bow)
    }

    /// Builds from unsorted pairs with possible duplicate indices; duplicate
    /// weights are summed, non-positive results dropped.
    pub fn from_unsorted(pairs: impl IntoIterator<Item = (u32, f64)>) -> Self {
        let mut merged: BTreeMap<u32, f64> = BTreeMap::new();
        for (token, weight) in pairs {
            *merged.entry(token).or_insert(0.0) += weight;
        }
        SparseBoW {
            entries: merged
                .into_iter()
                .filter_map(|(t, w)| {
                    let w = w as f32;
                    (w > 0.0).then_some((t, w))
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut previous: Option<u32> = None;
        for &(token, weight) in &self.entries {
            if let Some(p) = previous {
                if token <= p {
                    return Err(DeepBowError::Internal(format!(
                        "sparse indices not strictly ascending: {p} then {token}"
                    )));
                }
            }
            if !(weight > 0.0) {
                return Err(DeepBowError::Internal(format!(
                    "non-positive sparse weight {weight} at index {token}"
                )));
            }
            previous = Some(token);
        }
        Ok(())
    }

    pub fn entries(&self) -> &[(u32, f32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sum of weights in f64 (the Q-Synonym normalizer C).
    pub fn weight_sum(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w as f64).sum()
    }

    pub fn max_index(&self) -> Option<u32> {
        self.entries.last().map(|&(t, _)| t)
    }

    /// Bypasses validation so tests can construct deliberately broken
    /// vectors and watch the contract checks catch them.
    #[cfg(test)]
    pub(crate) fn new_unchecked_for_tests(entries: Vec<(u32, f32)>) -> Self {
        SparseBoW { entries }
    }
}

/// Tensor handles for the synonym-expansion head.
#[derive(Debug, Clone)]
pub struct SeHeadParams {
    /// Character-view projection, d × (v+B).
    pub w_c: TensorId,
    pub b_c: TensorId,
    /// Word-view projection over [h_c ‖ h̃_w], 2d × (v+B).
    pub w_w: TensorId,
    pub b_w: TensorId,
    /// Scalar gate, 2d × 1.
    pub w_g: TensorId,
    pub b_g: TensorId,
    pub d: usize,
    pub index_space: usize,
}

impl SeHeadParams {
    pub fn register(store: &mut ParamStore, d: usize, index_space: usize) -> Self {
        SeHeadParams {
            w_c: store.register("se.w_c", d, index_space, Init::UniformFanIn(d)),
            b_c: store.register("se.b_c", 1, index_space, Init::Zero),
            w_w: store.register("se.w_w", 2 * d, index_space, Init::UniformFanIn(2 * d)),
            b_w: store.register("se.b_w", 1, index_space, Init::Zero),
            w_g: store.register("se.w_g", 2 * d, 1, Init::UniformFanIn(2 * d)),
            b_g: store.register("se.b_g", 1, 1, Init::Zero),
            d,
            index_space,
        }
    }
}

/// Term-weighting BoW: attention-pool weights over the input's own words,
/// duplicate tokens merged by summing. Total weight is 1 up to rounding.
pub fn term_weighting_bow(h_c: &[f64], h_w: &Matrix, words: &TokenSequence) -> Result<SparseBoW> {
    if words.is_empty() {
        return Err(DeepBowError::Input(
            "term weighting of an empty word sequence".into(),
        ));
    }
    let weights = attention_pool(h_c, h_w);
    Ok(SparseBoW::from_unsorted(
        words
            .tokens
            .iter()
            .zip(&weights)
            .map(|(&t, &w)| (t, w)),
    ))
}

/// Sorted, deduplicated token set of a sequence (the `t ∈ S_w` membership
/// set of the gate mixture).
pub fn member_set(words: &TokenSequence) -> Vec<u32> {
    let mut members: Vec<u32> = words.tokens.clone();
    members.sort_unstable();
    members.dedup();
    members
}

/// Dense synonym-expansion representation.
///
/// `V_c = σ(h_c·W_c + b_c)`, `V_w = σ([h_c‖h̃_w]·W_w + b_w)`, scalar gate
/// `p_g = σ([h_c‖h̃_w]·W_g + b_g)`; the output is `p_g·V_c + (1−p_g)·V_w`
/// at member positions and `V_c` elsewhere.
pub fn synonym_expansion_dense(
    store: &ParamStore,
    head: &SeHeadParams,
    h_c: &[f64],
    h_w_tilde: &[f64],
    members: &[u32],
) -> Result<DenseBoW> {
    if h_c.len() != head.d || h_w_tilde.len() != head.d {
        return Err(DeepBowError::Config(format!(
            "expansion head expects width {}, got h_c={} h̃_w={}",
            head.d,
            h_c.len(),
            h_w_tilde.len()
        )));
    }
    let n = head.index_space;
    let hc_row = Matrix::row_vector(h_c);
    let mut v_c = math::linear_forward(&hc_row, store.slice(head.w_c), head.d, n, Some(store.slice(head.b_c)));
    for v in &mut v_c.data {
        *v = math::sigmoid(*v);
    }

    let mut concat = Vec::with_capacity(2 * head.d);
    concat.extend_from_slice(h_c);
    concat.extend_from_slice(h_w_tilde);
    let gate_logit = math::dot(&concat, store.slice(head.w_g)) + store.slice(head.b_g)[0];
    let p_g = math::sigmoid(gate_logit);

    // The word view is only ever read at member positions, so only those
    // columns of its projection are computed.
    let w_w = store.slice(head.w_w);
    let b_w = store.slice(head.b_w);
    let mut weights = v_c.data;
    for &t in members {
        let t = t as usize;
        debug_assert!(t < n, "member token outside index space");
        let mut z = b_w[t];
        for (i, &x) in concat.iter().enumerate() {
            z += x * w_w[i * n + t];
        }
        weights[t] = p_g * weights[t] + (1.0 - p_g) * math::sigmoid(z);
    }
    Ok(DenseBoW { weights })
}

/// Keeps the `k` largest weights (ties broken toward the smaller index),
/// re-sorted by index. Zero weights never survive.
pub fn truncate_topk(dense: &DenseBoW, k: usize) -> SparseBoW {
    let mut candidates: Vec<(u32, f64)> = dense
        .weights
        .iter()
        .enumerate()
        .filter(|&(_, &w)| w > 0.0)
        .map(|(t, &w)| (t as u32, w))
        .collect();
    candidates.sort_by(|(ta, wa), (tb, wb)| {
        wb.partial_cmp(wa)
            .expect("finite weights")
            .then_with(|| ta.cmp(tb))
    });
    candidates.truncate(k);
    candidates.sort_by_key(|&(t, _)| t);
    SparseBoW {
        entries: candidates
            .into_iter()
            .filter_map(|(t, w)| {
                let w = w as f32;
                (w > 0.0).then_some((t, w))
            })
            .collect(),
    }
}

/// Keeps weights ≥ τ, sorted by index. An empty result is legal.
pub fn truncate_threshold(dense: &DenseBoW, tau: f64) -> SparseBoW {
    SparseBoW {
        entries: dense
            .weights
            .iter()
            .enumerate()
            .filter(|&(_, &w)| w >= tau && w > 0.0)
            .filter_map(|(t, &w)| {
                let w = w as f32;
                (w > 0.0).then_some((t as u32, w))
            })
            .collect(),
    }
}

/// Applies a configured truncation policy.
pub fn truncate(dense: &DenseBoW, policy: &TruncationConfig) -> SparseBoW {
    match *policy {
        TruncationConfig::Topk { k } => truncate_topk(dense, k),
        TruncationConfig::Threshold { tau } => truncate_threshold(dense, tau),
    }
}

/// Uniform bag-of-words: each distinct token weighted multiplicity/n.
pub fn avg_bow(words: &TokenSequence) -> Result<SparseBoW> {
    if words.is_empty() {
        return Err(DeepBowError::Input("average BoW of empty input".into()));
    }
    let share = 1.0 / words.len() as f64;
    Ok(SparseBoW::from_unsorted(
        words.tokens.iter().map(|&t| (t, share)),
    ))
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn from_unsorted_always_satisfies_invariants(
            pairs in proptest::collection::vec((0u32..500, 0.0f64..1.0), 0..64)
        ) {
            let bow = SparseBoW::from_unsorted(pairs);
            prop_assert!(bow.validate().is_ok());
        }

        #[test]
        fn truncations_preserve_invariants_and_bounds(
            weights in proptest::collection::vec(0.0f64..=1.0, 1..200),
            k in 1usize..64,
            tau in 0.0f64..=1.0,
        ) {
            let dense = DenseBoW { weights };
            let top = truncate_topk(&dense, k);
            prop_assert!(top.validate().is_ok());
            prop_assert!(top.len() <= k);
            // Support counted at storage precision: a weight that rounds to
            // f32 zero cannot be stored.
            let nnz = dense.weights.iter().filter(|&&w| w as f32 > 0.0).count();
            prop_assert_eq!(top.len(), k.min(nnz));
            let thresholded = truncate_threshold(&dense, tau);
            prop_assert!(thresholded.validate().is_ok());
            for &(t, w) in thresholded.entries() {
                prop_assert!(dense.weights[t as usize] >= tau);
                prop_assert!(w > 0.0);
            }
        }
    }
}
