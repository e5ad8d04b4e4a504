//! End-to-end training: loss graphs, Adam, token-budget batching, and
//! validation-AUC early stopping.
//!
//! Each example contributes one tape: both texts run through the full
//! differentiable pipeline, the mode's score ops and clamped cross-entropy
//! sit on top, and the product side's dense expansion norm (divided by
//! `v_norm`) is added as the sparsity pressure. Batch gradients are the
//! mean of per-example gradients, so the loss scale is independent of batch
//! size. Everything is seeded and single-threaded: two runs from the same
//! seed produce bit-identical checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{fd_compare, FdReport, NodeId, Tape};
use crate::eval::{neg_pr_auc, roc_auc};
use crate::model::{tokenize, DeepBowModel, TokenizedText};
use crate::params::{GradBuffer, ParamStore};
use crate::vocab::{TokenSequence, Vocabulary};
use crate::{DeepBowError, Result};

/// Which loss variant drives training — and, downstream, how queries are
/// encoded for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// Query as term-weighting BoW; scored by the plain weighted sum.
    #[serde(rename = "t")]
    T,
    /// Query as synonym-expansion BoW with sum normalization, plus the
    /// uniform-query auxiliary term.
    #[serde(rename = "s")]
    S,
}

/// Optimizer and loop hyperparameters. Defaults are the desk-scale settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Approximate token count per batch.
    #[serde(default = "default_batch_tokens")]
    pub batch_tokens: usize,
    #[serde(default = "default_loss_mode")]
    pub loss_mode: LossMode,
    /// Hard cap on training epochs.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Stop after this many validation evaluations without a ROC-AUC
    /// improvement (0 = stop after the first evaluation, i.e. one epoch).
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    /// Divisor of the sparsity term; `None` means the full index space v+B.
    #[serde(default)]
    pub v_norm: Option<usize>,
    /// Whether the product-side l2 sparsity term is added at all; turning
    /// it off is the ablation arm, not a tuning knob.
    #[serde(default = "default_sparsity_norm")]
    pub sparsity_norm: bool,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_batch_tokens() -> usize {
    4096
}
fn default_loss_mode() -> LossMode {
    LossMode::S
}
fn default_epochs() -> usize {
    10
}
fn default_patience() -> usize {
    10
}
fn default_sparsity_norm() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            batch_tokens: default_batch_tokens(),
            loss_mode: default_loss_mode(),
            epochs: default_epochs(),
            patience: default_patience(),
            seed: 0,
            v_norm: None,
            sparsity_norm: default_sparsity_norm(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.batch_tokens == 0
            || self.epochs == 0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.epsilon <= 0.0
        {
            return Err(DeepBowError::Config(
                "training rates and budgets must be positive".into(),
            ));
        }
        if self.v_norm == Some(0) {
            return Err(DeepBowError::Config("v_norm must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One labeled query-product pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceExample {
    pub query: String,
    pub product: String,
    /// 1 = Good (relevant), 0 = Bad (irrelevant).
    pub label: u8,
}

/// Loads a TSV dataset: `<query>\t<product>\t<label∈{0,1}>` per line.
pub fn load_dataset(path: &Path) -> Result<Vec<RelevanceExample>> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

pub fn parse_dataset(text: &str) -> Result<Vec<RelevanceExample>> {
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let (query, product, label) = match (fields.next(), fields.next(), fields.next()) {
            (Some(q), Some(p), Some(l)) => (q, p, l),
            _ => {
                return Err(DeepBowError::Input(format!(
                    "dataset line {}: expected 3 tab-separated fields",
                    lineno + 1
                )))
            }
        };
        let label = match label {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DeepBowError::Input(format!(
                    "dataset line {}: label must be 0 or 1, got `{other}`",
                    lineno + 1
                )))
            }
        };
        examples.push(RelevanceExample {
            query: query.to_string(),
            product: product.to_string(),
            label,
        });
    }
    Ok(examples)
}

/// A pre-tokenized example, ready for repeated epochs.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub query: TokenizedText,
    pub product: TokenizedText,
    pub label: u8,
    /// Total stream length across both texts; drives batch packing.
    pub approx_tokens: usize,
}

/// Tokenizes a dataset once up front. Examples whose query or product has
/// no encodable content are skipped and counted, not fatal — real corpora
/// contain the occasional all-whitespace title.
pub fn prepare_examples(
    vocab: &Vocabulary,
    examples: &[RelevanceExample],
    max_len: usize,
) -> Result<(Vec<PreparedExample>, usize)> {
    let mut prepared = Vec::with_capacity(examples.len());
    let mut skipped = 0usize;
    for ex in examples {
        let query = match tokenize(vocab, &ex.query, max_len) {
            Ok(t) => t,
            Err(DeepBowError::Input(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let product = match tokenize(vocab, &ex.product, max_len) {
            Ok(t) => t,
            Err(DeepBowError::Input(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let approx_tokens =
            query.chars.len() + query.words.len() + product.chars.len() + product.words.len();
        prepared.push(PreparedExample {
            query,
            product,
            label: ex.label,
            approx_tokens,
        });
    }
    Ok((prepared, skipped))
}

/// Distinct tokens of a sequence with their uniform-BoW weights
/// (multiplicity / length), index-sorted.
fn avg_coefficients(words: &TokenSequence) -> (Vec<u32>, Vec<f64>) {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &t in &words.tokens {
        *counts.entry(t).or_insert(0) += 1;
    }
    let n = words.len() as f64;
    counts
        .into_iter()
        .map(|(t, c)| (t, c as f64 / n))
        .unzip()
}

/// Builds one example's complete loss on `tape` and returns the scalar
/// root. Mode `t`: CE of the term-weighted sum against the product's dense
/// expansion. Mode `s`: CE of the normalized expansion dot plus CE of the
/// uniform-query score. Both add the product-side norm over the
/// `norm_divisor`; `None` omits the sparsity term entirely (the ablation
/// arm).
pub fn example_loss_graph(
    model: &DeepBowModel,
    tape: &mut Tape<'_>,
    ex: &PreparedExample,
    mode: LossMode,
    norm_divisor: Option<usize>,
) -> NodeId {
    let q = model.build_on_tape(tape, &ex.query);
    let d = model.build_on_tape(tape, &ex.product);
    let label = ex.label as f64;
    let data_term = match mode {
        LossMode::T => {
            let r_t = tape.gather_dot(q.attention, d.dense, &ex.query.words.tokens);
            tape.bce(r_t, label)
        }
        LossMode::S => {
            let numerator = tape.dot_full(q.dense, d.dense);
            let c = tape.sum_all(q.dense);
            let r_s = tape.div_scalar(numerator, c);
            let ce_s = tape.bce(r_s, label);
            let (indices, coeffs) = avg_coefficients(&ex.query.words);
            let r_avg = tape.sparse_dot(d.dense, &indices, &coeffs);
            let ce_avg = tape.bce(r_avg, label);
            tape.add(ce_s, ce_avg)
        }
    };
    match norm_divisor {
        Some(v_norm) => {
            let norm = tape.l2_norm(d.dense);
            let norm_term = tape.scale(norm, 1.0 / v_norm as f64);
            tape.add(data_term, norm_term)
        }
        None => data_term,
    }
}

/// Runs one example forward and backward, accumulating parameter gradients
/// into `grads`; returns the example's loss.
pub fn example_loss_and_grads(
    model: &DeepBowModel,
    ex: &PreparedExample,
    mode: LossMode,
    norm_divisor: Option<usize>,
    grads: &mut GradBuffer,
) -> f64 {
    let mut tape = Tape::new(&model.store);
    let root = example_loss_graph(model, &mut tape, ex, mode, norm_divisor);
    let loss = tape.scalar(root);
    tape.backward(root, grads);
    loss
}

/// Training-time score of one pair with the dense (untruncated) product
/// expansion, mirroring the loss's score op for the mode. Used for
/// validation during training.
pub fn dense_pair_score(
    model: &DeepBowModel,
    query: &TokenizedText,
    product: &TokenizedText,
    mode: LossMode,
) -> Result<f64> {
    let qe = model.encode_tokens(query.clone())?;
    let de = model.encode_tokens(product.clone())?;
    let d_dense = model.se_dense(&de)?;
    match mode {
        LossMode::T => Ok(qe
            .attention
            .iter()
            .zip(&qe.words.tokens)
            .map(|(&p, &t)| p * d_dense.weights[t as usize])
            .sum()),
        LossMode::S => {
            let q_dense = model.se_dense(&qe)?;
            let c: f64 = q_dense.weights.iter().sum();
            if c <= 0.0 {
                return Ok(0.0);
            }
            let dot: f64 = q_dense
                .weights
                .iter()
                .zip(&d_dense.weights)
                .map(|(a, b)| a * b)
                .sum();
            Ok(dot / c)
        }
    }
}

/// Adam first and second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

fn tensor_at(store: &ParamStore, flat: usize) -> String {
    store
        .metas()
        .iter()
        .find(|m| flat >= m.offset && flat < m.offset + m.len())
        .map(|m| format!("{}[{}]", m.name, flat - m.offset))
        .unwrap_or_else(|| format!("offset {flat}"))
}

/// One bias-corrected Adam update over every parameter. A non-finite
/// gradient aborts with the offending tensor named.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &GradBuffer,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.data().len() != store.len() || state.m.len() != store.len() {
        return Err(DeepBowError::Mismatch(format!(
            "optimizer buffers ({} grads, {} moments) do not match {} parameters",
            grads.data().len(),
            state.m.len(),
            store.len()
        )));
    }
    if let Some(i) = grads.data().iter().position(|g| !g.is_finite()) {
        return Err(DeepBowError::Training(format!(
            "non-finite gradient {} at {} (step {})",
            grads.data()[i],
            tensor_at(store, i),
            state.t + 1
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let params = store.values_mut();
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads.data()[i];
        let m = &mut state.m[i];
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        let v = &mut state.v[i];
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Groups example indices into batches: order by approximate length so
/// similar-sized pairs share a batch, then fill greedily up to the token
/// budget. An example longer than the whole budget gets its own batch.
pub fn build_batches(prepared: &[PreparedExample], budget: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    order.sort_by_key(|&i| (prepared[i].approx_tokens, i));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut current_tokens = 0usize;
    for i in order {
        let t = prepared[i].approx_tokens;
        if !current.is_empty() && current_tokens + t > budget {
            batches.push(std::mem::take(&mut current));
            current_tokens = 0;
        }
        current.push(i);
        current_tokens += t;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// One validation round's record; serialized as a JSON line in metrics
/// logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-example training loss over the epoch.
    pub loss: f64,
    pub roc_auc: f64,
    pub neg_pr_auc: f64,
}

/// What a training run produced, beyond the updated model itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_roc_auc: f64,
    pub steps: u64,
    pub skipped_train: usize,
    pub skipped_valid: usize,
}

fn validation_metrics(
    model: &DeepBowModel,
    valid: &[PreparedExample],
    mode: LossMode,
) -> Result<(f64, f64)> {
    let mut scores = Vec::with_capacity(valid.len());
    let mut labels = Vec::with_capacity(valid.len());
    for ex in valid {
        scores.push(dense_pair_score(model, &ex.query, &ex.product, mode)?);
        labels.push(ex.label);
    }
    Ok((roc_auc(&scores, &labels)?, neg_pr_auc(&scores, &labels)?))
}

/// Trains `model` in place. Per epoch: batches in seed-shuffled order, one
/// Adam step per batch on mean gradients, then a validation round scoring
/// ROC-AUC and Neg PR-AUC. Stops when validation ROC-AUC has not improved
/// for `patience` consecutive rounds, or at the epoch cap. On return the
/// model holds the best-AUC parameters; `on_epoch` fires after each
/// validation round.
pub fn train(
    model: &mut DeepBowModel,
    vocab: &Vocabulary,
    train_set: &[RelevanceExample],
    valid_set: &[RelevanceExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(DeepBowError::Config(
            "training and validation splits must both be non-empty".into(),
        ));
    }
    let (prepared, skipped_train) = prepare_examples(vocab, train_set, model.cfg.max_len)?;
    let (valid, skipped_valid) = prepare_examples(vocab, valid_set, model.cfg.max_len)?;
    if prepared.is_empty() || valid.is_empty() {
        return Err(DeepBowError::Config(
            "every example in a split was degenerate after segmentation".into(),
        ));
    }
    let norm_divisor = cfg
        .sparsity_norm
        .then(|| cfg.v_norm.unwrap_or(model.index_space));
    let batches = build_batches(&prepared, cfg.batch_tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.store.len());
    let mut grads = GradBuffer::zeros_like(&model.store);

    let mut history = Vec::new();
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    let mut rounds_without_improvement = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut batch_order: Vec<usize> = (0..batches.len()).collect();
        batch_order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut example_count = 0usize;
        for &bi in &batch_order {
            let batch = &batches[bi];
            grads.clear();
            for &ei in batch {
                loss_sum += example_loss_and_grads(
                    model,
                    &prepared[ei],
                    cfg.loss_mode,
                    norm_divisor,
                    &mut grads,
                );
            }
            grads.scale(1.0 / batch.len() as f64);
            adam_step(&mut model.store, &grads, &mut adam, cfg)?;
            example_count += batch.len();
        }

        let (auc, npr) = validation_metrics(model, &valid, cfg.loss_mode)?;
        let metrics = EpochMetrics {
            epoch,
            loss: loss_sum / example_count as f64,
            roc_auc: auc,
            neg_pr_auc: npr,
        };
        on_epoch(&metrics);
        history.push(metrics);

        let improved = best.as_ref().is_none_or(|(b, _, _)| auc > *b);
        if improved {
            best = Some((auc, model.store.values().to_vec(), epoch));
            rounds_without_improvement = 0;
        } else {
            rounds_without_improvement += 1;
        }
        if rounds_without_improvement >= cfg.patience {
            break;
        }
    }

    let (best_roc_auc, best_values, best_epoch) = best.expect("at least one epoch ran");
    model.store.set_values(best_values)?;
    Ok(TrainReport {
        history,
        best_epoch,
        best_roc_auc,
        steps: adam.steps(),
        skipped_train,
        skipped_valid,
    })
}

/// Finite-difference check of one example's full loss gradient, sampling
/// `per_tensor` random entries from every parameter tensor.
pub fn loss_fd_report(
    model: &DeepBowModel,
    ex: &PreparedExample,
    mode: LossMode,
    norm_divisor: Option<usize>,
    per_tensor: usize,
    seed: u64,
) -> FdReport {
    let mut grads = GradBuffer::zeros_like(&model.store);
    example_loss_and_grads(model, ex, mode, norm_divisor, &mut grads);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::new();
    for meta in model.store.metas() {
        for _ in 0..per_tensor.min(meta.len()) {
            indices.push(meta.offset + rng.gen_range(0..meta.len()));
        }
    }
    // Perturb a scratch copy; the tensor handles index identically into
    // either store because the layouts match.
    let mut scratch = model.clone();
    fd_compare(&mut scratch.store, &grads, &indices, 1e-4, |store| {
        let mut tape = Tape::new(store);
        let root = example_loss_graph(model, &mut tape, ex, mode, norm_divisor);
        tape.scalar(root)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::vocab::{build_vocabulary, Vocabulary, WhitespaceSegmenter};

    #[test]
    fn train_config_defaults_are_desk_scale() {
        let config = TrainConfig::default();
        assert_eq!(config.learning_rate, 1e-4);
        assert_eq!(config.beta1, 0.9);
        assert_eq!(config.beta2, 0.999);
        assert_eq!(config.epsilon, 1e-8);
        assert_eq!(config.batch_tokens, 4096);
        assert_eq!(config.loss_mode, LossMode::S);
        assert!(config.validate().is_ok());
    }

    #[test]
    fn dataset_parses_and_validates_labels() {
        let parsed = parse_dataset("red dress\tsummer red dress\t1\nhat\tblue shoe\t0\n").unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].label, 1);
        assert_eq!(parsed[1].query, "hat");
        assert!(parse_dataset("a\tb\t2\n").is_err());
        assert!(parse_dataset("a\tb\n").is_err());
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            layers: 2,
            heads: 2,
            ffn: 16,
            max_len: 12,
        }
    }

    fn tiny_vocab() -> Vocabulary {
        let corpus = [
            "red dress summer",
            "red shoe",
            "blue dress",
            "blue shoe winter",
            "green hat",
            "red hat winter",
        ];
        build_vocabulary(corpus, 8, 7, 1, &WhitespaceSegmenter).unwrap()
    }

    fn prepared_pair(vocab: &Vocabulary, q: &str, p: &str, label: u8) -> PreparedExample {
        let (prepared, skipped) = prepare_examples(
            vocab,
            &[RelevanceExample {
                query: q.into(),
                product: p.into(),
                label,
            }],
            12,
        )
        .unwrap();
        assert_eq!(skipped, 0);
        prepared.into_iter().next().unwrap()
    }

    #[test]
    fn prepare_skips_degenerate_examples() {
        let vocab = tiny_vocab();
        let examples = vec![
            RelevanceExample {
                query: "red".into(),
                product: "red dress".into(),
                label: 1,
            },
            RelevanceExample {
                query: "   ".into(),
                product: "red dress".into(),
                label: 1,
            },
            RelevanceExample {
                query: "hat".into(),
                product: "".into(),
                label: 0,
            },
        ];
        let (prepared, skipped) = prepare_examples(&vocab, &examples, 12).unwrap();
        assert_eq!(prepared.len(), 1);
        assert_eq!(skipped, 2);
    }

    #[test]
    fn both_loss_gradients_match_finite_differences() {
        let vocab = tiny_vocab();
        let model = DeepBowModel::new(&tiny_cfg(), &vocab, 17).unwrap();
        let v_norm = vocab.index_space();
        for (mode, label) in [(LossMode::T, 1), (LossMode::S, 0)] {
            let ex = prepared_pair(&vocab, "red dress", "blue shoe winter", label);
            let report = loss_fd_report(&model, &ex, mode, Some(v_norm), 4, 99);
            assert!(
                report.passes(1e-4),
                "{mode:?}: worst {:?} rel err {:.3e} over {} checks",
                report.worst,
                report.max_rel_err,
                report.checked
            );
        }
    }

    #[test]
    fn forced_perfect_score_gives_negligible_loss() {
        let vocab = tiny_vocab();
        let mut model = DeepBowModel::new(&tiny_cfg(), &vocab, 3).unwrap();
        // Zero every parameter, then pin the expansion head so the product
        // expands to ~1 exactly on its own tokens and ~0 elsewhere: b_c
        // +60/−60 by column, gate forced to the character view.
        for v in model.store.values_mut() {
            *v = 0.0;
        }
        let ex = prepared_pair(&vocab, "red dress", "red dress", 1);
        let b_c = model.store.find("se.b_c").unwrap();
        {
            let slot = model.store.slice_mut(b_c);
            for v in slot.iter_mut() {
                *v = -60.0;
            }
            for &t in &ex.product.words.tokens {
                slot[t as usize] = 60.0;
            }
        }
        let b_g = model.store.find("se.b_g").unwrap();
        model.store.slice_mut(b_g)[0] = 60.0;

        // Query attention sums to 1 and every query token carries product
        // weight σ(60) ≈ 1, so R_t ≈ 1; a huge v_norm isolates the CE term.
        let mut tape = Tape::new(&model.store);
        let root = example_loss_graph(&model, &mut tape, &ex, LossMode::T, Some(1_000_000_000));
        assert!(tape.scalar(root) <= 1e-6, "loss {}", tape.scalar(root));
    }

    #[test]
    fn r_s_equals_r_avg_when_query_expansion_is_scaled_average() {
        // If the query's dense expansion is exactly c · BoW_avg for any
        // c > 0, sum normalization cancels c and the two CE terms coincide.
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let tokens = [1u32, 2, 2];
        let (indices, coeffs) = avg_coefficients(&TokenSequence {
            tokens: tokens.to_vec(),
            surfaces: vec!["a".into(), "b".into(), "b".into()],
            granularity: crate::vocab::Granularity::Word,
        });
        let c = 3.7;
        let mut q_weights = vec![0.0; 6];
        for (&i, &w) in indices.iter().zip(&coeffs) {
            q_weights[i as usize] = c * w;
        }
        let q = tape.constant(crate::math::Matrix::from_vec(1, 6, q_weights));
        let d = tape.constant(crate::math::Matrix::from_vec(
            1,
            6,
            vec![0.9, 0.2, 0.6, 0.1, 0.4, 0.8],
        ));
        let numerator = tape.dot_full(q, d);
        let total = tape.sum_all(q);
        let r_s = tape.div_scalar(numerator, total);
        let r_avg = tape.sparse_dot(d, &indices, &coeffs);
        assert!((tape.scalar(r_s) - tape.scalar(r_avg)).abs() < 1e-12);
        let ce_s = tape.bce(r_s, 1.0);
        let ce_avg = tape.bce(r_avg, 1.0);
        assert!((tape.scalar(ce_s) - tape.scalar(ce_avg)).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_changes_nothing() {
        let vocab = tiny_vocab();
        let mut model = DeepBowModel::new(&tiny_cfg(), &vocab, 7).unwrap();
        let before = model.store.values().to_vec();
        let grads = GradBuffer::zeros_like(&model.store);
        let mut state = AdamState::new(model.store.len());
        adam_step(&mut model.store, &grads, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(model.store.values(), &before[..]);
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        let vocab = tiny_vocab();
        let mut model = DeepBowModel::new(&tiny_cfg(), &vocab, 7).unwrap();
        let cfg = TrainConfig::default();
        let before = model.store.values().to_vec();
        let mut grads = GradBuffer::zeros_like(&model.store);
        // Alternating well-scaled gradients, |g| ≫ ε.
        for (i, g) in grads.data_mut().iter_mut().enumerate() {
            *g = if i % 2 == 0 { 0.5 } else { -0.25 };
        }
        let mut state = AdamState::new(model.store.len());
        adam_step(&mut model.store, &grads, &mut state, &cfg).unwrap();
        for (i, (&after, &b)) in model.store.values().iter().zip(&before).enumerate() {
            let expected = b - cfg.learning_rate * grads.data()[i].signum();
            assert!(
                (after - expected).abs() < 1e-9,
                "index {i}: {after} vs {expected}"
            );
        }
    }

    #[test]
    fn adam_constant_gradient_matches_reference_trace() {
        // With constant gradient from zero state, bias correction collapses
        // to m̂ = g and v̂ = g² at every step, so each update is exactly
        // lr·g/(|g|+ε).
        let mut store = ParamStore::new();
        let id = store.register("p", 1, 1, crate::params::Init::Zero);
        store.slice_mut(id)[0] = 1.0;
        let mut grads = GradBuffer::zeros_like(&store);
        grads.data_mut()[0] = 0.5;
        let mut state = AdamState::new(1);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        adam_step(&mut store, &grads, &mut state, &cfg).unwrap();
        adam_step(&mut store, &grads, &mut state, &cfg).unwrap();
        let per_step = 0.1 * 0.5 / (0.5 + cfg.epsilon);
        let expected = 1.0 - 2.0 * per_step;
        assert!((store.slice(id)[0] - expected).abs() < 1e-12);
        assert_eq!(state.steps(), 2);
    }

    #[test]
    fn adam_rejects_nan_gradients_with_diagnostics() {
        let vocab = tiny_vocab();
        let mut model = DeepBowModel::new(&tiny_cfg(), &vocab, 7).unwrap();
        let mut grads = GradBuffer::zeros_like(&model.store);
        let id = model.store.find("char.layer0.w_q").unwrap();
        let offset = model.store.meta(id).offset;
        grads.data_mut()[offset + 3] = f64::NAN;
        let mut state = AdamState::new(model.store.len());
        match adam_step(&mut model.store, &grads, &mut state, &TrainConfig::default()) {
            Err(DeepBowError::Training(msg)) => {
                assert!(msg.contains("char.layer0.w_q[3]"), "message: {msg}")
            }
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn batches_respect_budget_and_length_grouping() {
        let vocab = tiny_vocab();
        let mut prepared = Vec::new();
        for i in 0..20 {
            let text = match i % 3 {
                0 => "red",
                1 => "red dress",
                _ => "red dress summer winter",
            };
            prepared.push(prepared_pair(&vocab, "red", text, 1));
        }
        let budget = 30;
        let batches = build_batches(&prepared, budget);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        for batch in &batches {
            let total: usize = batch.iter().map(|&i| prepared[i].approx_tokens).sum();
            assert!(batch.len() == 1 || total <= budget, "batch of {total}");
        }
        // Length-sorted packing: batch boundaries never interleave sizes.
        let flat_sizes: Vec<usize> = batches
            .iter()
            .flatten()
            .map(|&i| prepared[i].approx_tokens)
            .collect();
        let mut sorted = flat_sizes.clone();
        sorted.sort_unstable();
        assert_eq!(flat_sizes, sorted);
    }

    /// A tiny separable world: label 1 iff the query word appears in the
    /// product text.
    fn toy_dataset() -> Vec<RelevanceExample> {
        let words = ["red", "blue", "dress", "shoe", "hat", "winter"];
        let n = words.len();
        let mut out = Vec::new();
        for (i, &q) in words.iter().enumerate() {
            for (j, &other) in words.iter().enumerate() {
                if i == j {
                    continue;
                }
                // Positive: query word present. Negative: absent.
                out.push(RelevanceExample {
                    query: q.into(),
                    product: format!("{q} {other}"),
                    label: 1,
                });
                let third = words[(j + 1) % n];
                if third != q {
                    out.push(RelevanceExample {
                        query: q.into(),
                        product: format!("{other} {third}"),
                        label: 0,
                    });
                }
                let fourth = words[(j + 2) % n];
                if fourth != q {
                    out.push(RelevanceExample {
                        query: q.into(),
                        product: format!("{q} {other} {fourth}"),
                        label: 1,
                    });
                }
            }
        }
        out
    }

    #[test]
    fn loss_decreases_on_separable_toy_set() {
        let vocab = tiny_vocab();
        let examples = toy_dataset();
        let (prepared, _) = prepare_examples(&vocab, &examples, 12).unwrap();
        let subset = &prepared[..64.min(prepared.len())];
        assert_eq!(subset.len(), 64);
        let v_norm = vocab.index_space();

        for mode in [LossMode::T, LossMode::S] {
            let mut model = DeepBowModel::new(&tiny_cfg(), &vocab, 23).unwrap();
            let cfg = TrainConfig {
                learning_rate: 1e-2,
                batch_tokens: 4096,
                ..TrainConfig::default()
            };
            let batches = build_batches(subset, cfg.batch_tokens);
            let mut grads = GradBuffer::zeros_like(&model.store);
            let mut state = AdamState::new(model.store.len());
            let measure = |model: &DeepBowModel| -> f64 {
                let mut g = GradBuffer::zeros_like(&model.store);
                let total: f64 = subset
                    .iter()
                    .map(|ex| example_loss_and_grads(model, ex, mode, Some(v_norm), &mut g))
                    .sum();
                total / subset.len() as f64
            };
            let initial = measure(&model);
            let mut step = 0;
            'outer: loop {
                for batch in &batches {
                    grads.clear();
                    for &ei in batch {
                        example_loss_and_grads(&model, &subset[ei], mode, Some(v_norm), &mut grads);
                    }
                    grads.scale(1.0 / batch.len() as f64);
                    adam_step(&mut model.store, &grads, &mut state, &cfg).unwrap();
                    step += 1;
                    if step == 200 {
                        break 'outer;
                    }
                }
            }
            let final_loss = measure(&model);
            assert!(
                final_loss < 0.3 * initial,
                "{mode:?}: {initial} → {final_loss} after 200 steps"
            );
        }
    }

    #[test]
    fn patience_zero_stops_after_one_epoch() {
        let vocab = tiny_vocab();
        let examples = toy_dataset();
        let (train_set, valid_set) = examples.split_at(examples.len() - 12);
        let mut model = DeepBowModel::new(&tiny_cfg(), &vocab, 29).unwrap();
        let cfg = TrainConfig {
            patience: 0,
            epochs: 50,
            batch_tokens: 128,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &vocab, train_set, valid_set, &cfg, |_| {}).unwrap();
        assert_eq!(report.history.len(), 1);
        assert_eq!(report.best_epoch, 1);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let vocab = tiny_vocab();
        let examples = toy_dataset();
        let (train_set, valid_set) = examples.split_at(examples.len() - 12);
        let cfg = TrainConfig {
            epochs: 2,
            patience: 5,
            batch_tokens: 128,
            learning_rate: 1e-3,
            seed: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = DeepBowModel::new(&tiny_cfg(), &vocab, 31).unwrap();
            let report = train(&mut model, &vocab, train_set, valid_set, &cfg, |_| {}).unwrap();
            (model.content_hash(), report.history)
        };
        let (hash_a, history_a) = run();
        let (hash_b, history_b) = run();
        assert_eq!(hash_a, hash_b);
        assert_eq!(history_a, history_b);
    }

    #[test]
    fn train_rejects_empty_splits() {
        let vocab = tiny_vocab();
        let examples = toy_dataset();
        let mut model = DeepBowModel::new(&tiny_cfg(), &vocab, 1).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&mut model, &vocab, &[], &examples, &cfg, |_| {}),
            Err(DeepBowError::Config(_))
        ));
        assert!(matches!(
            train(&mut model, &vocab, &examples, &[], &cfg, |_| {}),
            Err(DeepBowError::Config(_))
        ));
    }
}
