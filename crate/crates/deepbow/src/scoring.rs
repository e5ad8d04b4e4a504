//! Relevance scoring over sparse representations.
//!
//! All three scores reduce to one primitive: a linear-time two-pointer walk
//! over two index-sorted sparse vectors, accumulating weight products at
//! shared indices in 64-bit arithmetic. The cursor rule is fixed — advance
//! the cursor at the smaller index; on equal indices accumulate, then
//! advance both — so the accumulation order is deterministic and symmetric
//! in the argument order.

use serde::{Deserialize, Serialize};

use crate::bow::SparseBoW;
use crate::vocab::{TokenSequence, Vocabulary};
use crate::{DeepBowError, Result};

/// Which query representation a score or explanation is computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Query as term-weighting BoW (weights sum to 1).
    QWeight,
    /// Query as synonym-expansion BoW, normalized by its weight sum.
    QSynonym,
}

impl std::str::FromStr for ScoreMode {
    type Err = DeepBowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q_weight" => Ok(ScoreMode::QWeight),
            "q_synonym" => Ok(ScoreMode::QSynonym),
            other => Err(DeepBowError::Config(format!(
                "unknown score mode `{other}` (expected q_weight or q_synonym)"
            ))),
        }
    }
}

impl std::fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreMode::QWeight => "q_weight",
            ScoreMode::QSynonym => "q_synonym",
        })
    }
}

#[cfg(debug_assertions)]
fn check_contract(side: &str, bow: &SparseBoW) -> Result<()> {
    bow.validate().map_err(|e| {
        DeepBowError::Internal(format!("{side} operand violates sparse contract: {e}"))
    })
}

/// Sorted-intersection dot product: Σ a·b over shared indices, one
/// multiply-add per shared index, 64-bit accumulation. Operand invariants
/// are checked in debug builds only.
pub fn intersect_dot(a: &SparseBoW, b: &SparseBoW) -> Result<f64> {
    #[cfg(debug_assertions)]
    {
        check_contract("left", a)?;
        check_contract("right", b)?;
    }
    Ok(intersect_dot_counted(a, b).0)
}

/// [`intersect_dot`] plus the number of cursor advances performed — the
/// linearity witness. Advances never exceed |a| + |b|.
pub fn intersect_dot_counted(a: &SparseBoW, b: &SparseBoW) -> (f64, usize) {
    let (xs, ys) = (a.entries(), b.entries());
    let mut score = 0.0f64;
    let mut advances = 0usize;
    let (mut i, mut j) = (0usize, 0usize);
    while i < xs.len() && j < ys.len() {
        let (ti, wi) = xs[i];
        let (tj, wj) = ys[j];
        match ti.cmp(&tj) {
            std::cmp::Ordering::Equal => {
                score += wi as f64 * wj as f64;
                i += 1;
                j += 1;
                advances += 2;
            }
            std::cmp::Ordering::Less => {
                i += 1;
                advances += 1;
            }
            std::cmp::Ordering::Greater => {
                j += 1;
                advances += 1;
            }
        }
    }
    (score, advances)
}

/// Q-Weight relevance: the plain weighted sum Σ p·g. With the query side a
/// probability distribution and expansion weights in [0,1], the score lies
/// in [0,1].
pub fn score_q_weight(q: &SparseBoW, d: &SparseBoW) -> Result<f64> {
    intersect_dot(q, d)
}

/// Result of Q-Synonym scoring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynonymScore {
    pub score: f64,
    /// True when the query representation was empty (score fixed at 0).
    pub degenerate: bool,
}

/// Q-Synonym relevance: Σ q·d divided by C = Σ q. An empty query scores 0
/// and is flagged degenerate rather than erroring — an over-aggressive
/// truncation policy can legitimately empty a representation.
pub fn score_q_synonym(q: &SparseBoW, d: &SparseBoW) -> Result<SynonymScore> {
    let c = q.weight_sum();
    if c <= 0.0 {
        return Ok(SynonymScore {
            score: 0.0,
            degenerate: true,
        });
    }
    Ok(SynonymScore {
        score: intersect_dot(q, d)? / c,
        degenerate: false,
    })
}

/// Uniform-query relevance: avg-BoW of the query words against the product
/// representation.
pub fn score_avg(q_words: &TokenSequence, d: &SparseBoW) -> Result<f64> {
    let avg = crate::bow::avg_bow(q_words)?;
    intersect_dot(&avg, d)
}

/// One matched term of an explanation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchRow {
    pub token: u32,
    /// Word surface, or `‹hash:b›` for bucket tokens.
    pub term: String,
    /// Effective query weight (Q-Synonym weights are already divided by C).
    pub p: f64,
    /// Product-side weight.
    pub g: f64,
    /// p·g; rows sum to the total.
    pub pg: f64,
}

/// Term-by-term breakdown of a score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchExplanation {
    pub matches: Vec<MatchRow>,
    pub total: f64,
}

/// Explains a score: one row per shared index, whose contributions sum to
/// the corresponding score op's result. In Q-Synonym mode the query weights
/// are divided by the normalizer C first, so `total` reproduces the
/// normalized score.
pub fn explain(
    q: &SparseBoW,
    d: &SparseBoW,
    vocab: &Vocabulary,
    mode: ScoreMode,
) -> Result<MatchExplanation> {
    #[cfg(debug_assertions)]
    {
        check_contract("left", q)?;
        check_contract("right", d)?;
    }
    let scale = match mode {
        ScoreMode::QWeight => 1.0,
        ScoreMode::QSynonym => {
            let c = q.weight_sum();
            if c <= 0.0 {
                return Ok(MatchExplanation {
                    matches: Vec::new(),
                    total: 0.0,
                });
            }
            1.0 / c
        }
    };
    let mut matches = Vec::new();
    let mut total = 0.0f64;
    let (xs, ys) = (q.entries(), d.entries());
    let (mut i, mut j) = (0usize, 0usize);
    while i < xs.len() && j < ys.len() {
        let (ti, wi) = xs[i];
        let (tj, wj) = ys[j];
        match ti.cmp(&tj) {
            std::cmp::Ordering::Equal => {
                let p = wi as f64 * scale;
                let g = wj as f64;
                let pg = p * g;
                total += pg;
                matches.push(MatchRow {
                    token: ti,
                    term: vocab.surface(ti),
                    p,
                    g,
                    pg,
                });
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    Ok(MatchExplanation { matches, total })
}
