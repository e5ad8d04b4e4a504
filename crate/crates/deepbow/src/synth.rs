//! Synthetic relevance data with a planted synonym structure.
//!
//! The generator builds a pronounceable pseudo-vocabulary, designates a set
//! of synonym pairs, and emits query-product examples labeled by a pure
//! overlap rule: a pair is Good when at least `min_matches` of the query's
//! words match the product up to synonymy. Because some matches are routed
//! through a synonym partner rather than the literal word, a scorer that
//! only counts exact overlaps is systematically wrong on part of the data —
//! those examples carry a `synonym_dependent` flag so evaluations can
//! isolate them.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::training::RelevanceExample;
use crate::{DeepBowError, Result};

/// Chance that a matched slot in a Good pair prefers a product word that
/// has a synonym partner, when one is available.
const MEMBER_BIAS: f64 = 0.85;
/// Chance that a matched pair-member word enters a Good query as its
/// partner instead of itself.
const SWAP_PROB: f64 = 0.6;
/// Chance that a Bad pair sits just under the match threshold instead of
/// drawing its overlap count uniformly.
const NEAR_MISS_PROB: f64 = 0.6;

/// Shape of the generated corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Distinct vocabulary words.
    pub words: usize,
    /// Synonym pairs; consumes the first `2 * synonym_pairs` words.
    pub synonym_pairs: usize,
    pub train: usize,
    pub test: usize,
    pub product_min: usize,
    pub product_max: usize,
    pub query_words: usize,
    /// Matches (up to synonymy) required for a Good label.
    pub min_matches: usize,
    /// Distinct product texts; examples cycle through the pool, so each
    /// product recurs with balanced labels (a catalog queried many ways,
    /// and nothing a product-side memorizer could exploit).
    pub product_pool: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            words: 2000,
            synonym_pairs: 200,
            train: 20_000,
            test: 2_000,
            product_min: 4,
            product_max: 6,
            query_words: 3,
            min_matches: 2,
            product_pool: 4000,
            seed: 77,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DeepBowError::Config(msg));
        if self.words < 2 * self.synonym_pairs {
            return fail(format!(
                "{} synonym pairs need at least {} words, have {}",
                self.synonym_pairs,
                2 * self.synonym_pairs,
                self.words
            ));
        }
        if self.words < self.product_max + self.query_words + 8 {
            return fail(format!("{} words is too few to sample from", self.words));
        }
        if self.product_min < self.min_matches || self.product_min == 0 {
            return fail(format!(
                "products of {} words cannot host {} matches",
                self.product_min, self.min_matches
            ));
        }
        if self.product_max < self.product_min {
            return fail("product_max below product_min".into());
        }
        if self.query_words < self.min_matches || self.min_matches == 0 {
            return fail(format!(
                "queries of {} words cannot host {} matches",
                self.query_words, self.min_matches
            ));
        }
        if self.product_pool == 0 {
            return fail("product_pool must be ≥ 1".into());
        }
        Ok(())
    }
}

/// One labeled pair plus whether its label depends on synonymy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthExample {
    pub query: String,
    pub product: String,
    pub label: u8,
    /// True when counting only exact word overlaps would flip the label.
    pub synonym_dependent: bool,
}

impl SynthExample {
    pub fn to_example(&self) -> RelevanceExample {
        RelevanceExample {
            query: self.query.clone(),
            product: self.product.clone(),
            label: self.label,
        }
    }
}

/// Generated corpus: vocabulary, canonical-form map, and both splits.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub config: SynthConfig,
    pub words: Vec<String>,
    /// Maps each synonym-pair member to the pair's canonical word (the
    /// earlier member). Words absent from the map are their own canon.
    pub canon: HashMap<String, String>,
    pub train: Vec<SynthExample>,
    pub test: Vec<SynthExample>,
}

impl SynthData {
    /// Lines that expose every vocabulary word for `build_vocabulary`.
    pub fn vocabulary_corpus(&self) -> Vec<String> {
        self.words.chunks(16).map(|c| c.join(" ")).collect()
    }
}

/// Converts a slice of either split into training examples.
pub fn to_examples(examples: &[SynthExample]) -> Vec<RelevanceExample> {
    examples.iter().map(SynthExample::to_example).collect()
}

fn canon_of<'a>(canon: &'a HashMap<String, String>, word: &'a str) -> &'a str {
    canon.get(word).map(String::as_str).unwrap_or(word)
}

/// Counts distinct query words whose canonical form appears among the
/// product's canonical forms. With an empty map this is exact overlap.
pub fn overlap_count(canon: &HashMap<String, String>, query: &str, product: &str) -> usize {
    let product_canon: HashSet<&str> = product
        .split_whitespace()
        .map(|w| canon_of(canon, w))
        .collect();
    let query_words: HashSet<&str> = query.split_whitespace().collect();
    query_words
        .iter()
        .filter(|w| product_canon.contains(canon_of(canon, w)))
        .count()
}

/// The labeling rule: Good iff at least `min_matches` query words match
/// the product up to synonymy.
pub fn rule_label(
    canon: &HashMap<String, String>,
    query: &str,
    product: &str,
    min_matches: usize,
) -> u8 {
    u8::from(overlap_count(canon, query, product) >= min_matches)
}

/// Exact-word-overlap baseline: fraction of distinct query words literally
/// present in the product.
pub fn exact_overlap_score(query: &str, product: &str) -> f64 {
    let product_words: HashSet<&str> = product.split_whitespace().collect();
    let query_words: HashSet<&str> = query.split_whitespace().collect();
    if query_words.is_empty() {
        return 0.0;
    }
    let hits = query_words
        .iter()
        .filter(|w| product_words.contains(**w))
        .count();
    hits as f64 / query_words.len() as f64
}

const CONSONANTS: [&str; 20] = [
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "x",
    "y", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Pronounceable words from consonant-vowel syllables: consonant-ending
/// short forms first, then vowel-ending longer forms. The two shapes can
/// never collide, so all words are pairwise distinct.
fn syllable_words(n: usize) -> Result<Vec<String>> {
    let mut words = Vec::with_capacity(n);
    for c1 in CONSONANTS {
        for v1 in VOWELS {
            for c2 in CONSONANTS {
                if words.len() == n {
                    return Ok(words);
                }
                words.push(format!("{c1}{v1}{c2}"));
            }
        }
    }
    for c1 in CONSONANTS {
        for v1 in VOWELS {
            for c2 in CONSONANTS {
                for v2 in VOWELS {
                    if words.len() == n {
                        return Ok(words);
                    }
                    words.push(format!("{c1}{v1}{c2}{v2}"));
                }
            }
        }
    }
    let capacity = CONSONANTS.len().pow(2) * VOWELS.len() * (1 + VOWELS.len());
    Err(DeepBowError::Config(format!(
        "at most {capacity} synthetic words available, {n} requested"
    )))
}

/// Generates both splits deterministically from the config's seed. Every
/// query is emitted exactly twice, back to back: once against the product
/// it was built from (Good) and once against a low-overlap product from
/// the same pool (Bad). Each split is therefore exactly balanced when its
/// size is even, and — more importantly — no function of the query text
/// alone, and almost no function of the product text alone, carries label
/// information: only the pairing does. Every label is recomputed from
/// [`rule_label`] before acceptance.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut words = syllable_words(cfg.words)?;
    // Pair up a shuffled order so synonym partners share no systematic
    // surface pattern a character encoder could shortcut through.
    words.shuffle(&mut rng);
    let mut canon = HashMap::new();
    let mut partner: HashMap<&str, &str> = HashMap::new();
    for i in 0..cfg.synonym_pairs {
        let (a, b) = (&words[2 * i], &words[2 * i + 1]);
        canon.insert(b.clone(), a.clone());
        partner.insert(a, b);
        partner.insert(b, a);
    }

    let mut pool: Vec<Vec<&str>> = Vec::with_capacity(cfg.product_pool);
    for _ in 0..cfg.product_pool {
        let p_len = rng.gen_range(cfg.product_min..=cfg.product_max);
        let product: Vec<&str> = rand::seq::index::sample(&mut rng, cfg.words, p_len)
            .iter()
            .map(|i| words[i].as_str())
            .collect();
        pool.push(product);
    }
    // Word surface → products containing it literally, for near-miss
    // negatives that an exact-overlap scorer cannot tell from a Good pair.
    let mut by_surface: HashMap<&str, Vec<usize>> = HashMap::new();
    for (pid, product) in pool.iter().enumerate() {
        for &w in product {
            by_surface.entry(w).or_default().push(pid);
        }
    }

    let total = cfg.train + cfg.test;
    let n_queries = total.div_ceil(2);
    // Positives minus negatives taken, per product; negatives prefer the
    // most owed product so product-side label balance stays tight.
    let mut owed: Vec<i64> = vec![0; cfg.product_pool];
    let mut examples = Vec::with_capacity(n_queries * 2);
    for qi in 0..n_queries {
        let a = qi % cfg.product_pool;
        let query = build_query(cfg, &pool[a], &words, &canon, &partner, &mut rng);
        owed[a] += 1;
        examples.push(finish_example(&query, &pool[a], &canon, cfg.min_matches));
        let b = pick_negative(cfg, &pool, &by_surface, &query, &canon, &owed, a, &mut rng)?;
        owed[b] -= 1;
        examples.push(finish_example(&query, &pool[b], &canon, cfg.min_matches));
    }
    examples.truncate(total);
    let test = examples.split_off(cfg.train);
    Ok(SynthData {
        config: cfg.clone(),
        words,
        canon,
        train: examples,
        test,
    })
}

/// Builds one query for `product`: `min_matches..` of its words (leaning
/// toward synonym-pair members, sometimes voiced as the partner word) plus
/// fillers whose canonical forms miss the product, shuffled.
fn build_query(
    cfg: &SynthConfig,
    product: &[&str],
    words: &[String],
    canon: &HashMap<String, String>,
    partner: &HashMap<&str, &str>,
    rng: &mut ChaCha8Rng,
) -> String {
    let product_canon: HashSet<&str> = product.iter().map(|w| canon_of(canon, w)).collect();
    let product_text = product.join(" ");
    loop {
        let n_match = rng.gen_range(cfg.min_matches..=cfg.query_words.min(product.len()));
        let mut available: Vec<&str> = product.to_vec();
        let mut query: Vec<&str> = Vec::with_capacity(cfg.query_words);
        for _ in 0..n_match {
            let members: Vec<&str> = available
                .iter()
                .copied()
                .filter(|w| partner.contains_key(w))
                .collect();
            let pick = if !members.is_empty() && rng.gen_bool(MEMBER_BIAS) {
                *members.choose(rng).expect("non-empty members")
            } else {
                *available.choose(rng).expect("non-empty product")
            };
            available.retain(|&w| w != pick);
            let voiced = match partner.get(pick) {
                Some(&p) if rng.gen_bool(SWAP_PROB) => p,
                _ => pick,
            };
            query.push(voiced);
        }
        while query.len() < cfg.query_words {
            let w = words.choose(rng).expect("non-empty vocabulary").as_str();
            if !product_canon.contains(canon_of(canon, w)) && !query.contains(&w) {
                query.push(w);
            }
        }
        if query.iter().collect::<HashSet<_>>().len() != query.len() {
            continue; // a swap collided with another chosen word; redraw
        }
        query.shuffle(rng);
        let text = query.join(" ");
        if rule_label(canon, &text, &product_text, cfg.min_matches) == 1 {
            return text;
        }
    }
}

/// Chooses the Bad-side product for a query: usually one literally
/// containing one of the query's words (a near miss indistinguishable
/// from a Good pair by exact overlap), otherwise a random non-match;
/// among valid candidates the product most owed a negative wins.
fn pick_negative(
    cfg: &SynthConfig,
    pool: &[Vec<&str>],
    by_surface: &HashMap<&str, Vec<usize>>,
    query: &str,
    canon: &HashMap<String, String>,
    owed: &[i64],
    positive: usize,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    const CANDIDATES: usize = 8;
    let mut candidates: Vec<usize> = Vec::with_capacity(2 * CANDIDATES);
    if rng.gen_bool(NEAR_MISS_PROB) {
        let query_words: Vec<&str> = query.split_whitespace().collect();
        let &w = query_words.choose(rng).expect("non-empty query");
        if let Some(bucket) = by_surface.get(w) {
            for _ in 0..CANDIDATES {
                candidates.push(*bucket.choose(rng).expect("non-empty bucket"));
            }
        }
    }
    for _ in 0..CANDIDATES {
        candidates.push(rng.gen_range(0..pool.len()));
    }
    let mut best: Option<usize> = None;
    for pid in candidates {
        if pid == positive || Some(pid) == best {
            continue;
        }
        if rule_label(canon, query, &pool[pid].join(" "), cfg.min_matches) != 0 {
            continue;
        }
        if best.is_none_or(|cur| owed[pid] > owed[cur]) {
            best = Some(pid);
        }
    }
    if let Some(pid) = best {
        return Ok(pid);
    }
    for offset in 1..pool.len() {
        let pid = (positive + offset) % pool.len();
        if rule_label(canon, query, &pool[pid].join(" "), cfg.min_matches) == 0 {
            return Ok(pid);
        }
    }
    Err(DeepBowError::Config(
        "every product in the pool matches this query; enlarge the pool or vocabulary".into(),
    ))
}

fn finish_example(
    query: &str,
    product: &[&str],
    canon: &HashMap<String, String>,
    min_matches: usize,
) -> SynthExample {
    let product_text = product.join(" ");
    let label = rule_label(canon, query, &product_text, min_matches);
    let exact_label = rule_label(&HashMap::new(), query, &product_text, min_matches);
    SynthExample {
        query: query.to_string(),
        product: product_text,
        label,
        synonym_dependent: label != exact_label,
    }
}

/// Writes examples in the TSV layout `load_dataset` reads.
pub fn write_dataset(path: &Path, examples: &[SynthExample]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&format!("{}\t{}\t{}\n", ex.query, ex.product, ex.label));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes the per-example synonym-dependence flags, one `0`/`1` per line,
/// row-aligned with [`write_dataset`] output for the same slice.
pub fn write_synonym_flags(path: &Path, examples: &[SynthExample]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(if ex.synonym_dependent { "1\n" } else { "0\n" });
    }
    std::fs::write(path, out)?;
    Ok(())
}
