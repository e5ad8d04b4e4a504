//! Model assembly and checkpointing.
//!
//! One model serves both queries and product titles: a character-stream
//! encoder, a word-stream encoder, and the shared expansion head, all living
//! in a single flat parameter store. The two streams each own an embedding
//! table over the same token index space. Only the character stream's
//! multi-granularity pooling feeds the heads — the word stream contributes
//! its final-layer token states, so its own pooling projections are inert by
//! construction.
//!
//! Checkpoints are deliberately timestamp-free: the serialized bytes — and
//! therefore the content hash that downstream artifacts pin — are a pure
//! function of configuration, seed, and parameter values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{NodeId, Tape};
use crate::bow::{
    member_set, synonym_expansion_dense, term_weighting_bow, DenseBoW, SeHeadParams, SparseBoW,
};
use crate::config::ModelConfig;
use crate::encoder::{self, attention_pool, weighted_word_summary, EncoderParams};
use crate::math::Matrix;
use crate::params::ParamStore;
use crate::vocab::{segmenter_by_id, TokenSequence, Vocabulary};
use crate::{DeepBowError, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"DBCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Both token streams of one text, ready to encode.
#[derive(Debug, Clone)]
pub struct TokenizedText {
    pub chars: TokenSequence,
    /// Word unigrams with any configured n-grams appended.
    pub words: TokenSequence,
}

fn truncate_sequence(seq: &mut TokenSequence, max_len: usize) {
    seq.tokens.truncate(max_len);
    seq.surfaces.truncate(max_len);
}

/// Segments a text into both streams: characters per Unicode scalar, words
/// per the vocabulary's segmenter with n-grams appended after the unigrams.
/// Each stream is truncated to `max_len` after assembly. Texts with no
/// encodable content are rejected.
pub fn tokenize(vocab: &Vocabulary, text: &str, max_len: usize) -> Result<TokenizedText> {
    let segmenter = segmenter_by_id(vocab.segmenter_id())?;
    let mut chars = vocab.segment_characters(text);
    let mut words = vocab.segment_words(text, segmenter.as_ref());
    if chars.is_empty() || words.is_empty() {
        return Err(DeepBowError::Input(format!(
            "text {text:?} has no encodable content"
        )));
    }
    if vocab.ngram_order() >= 2 && words.len() >= 2 {
        let ngrams = vocab.extract_ngrams(&words, vocab.ngram_order());
        words.tokens.extend(ngrams.tokens);
        words.surfaces.extend(ngrams.surfaces);
    }
    truncate_sequence(&mut chars, max_len);
    truncate_sequence(&mut words, max_len);
    Ok(TokenizedText { chars, words })
}

/// Everything the heads need about one encoded text (plain values).
#[derive(Debug, Clone)]
pub struct TextEncoding {
    pub chars: TokenSequence,
    pub words: TokenSequence,
    /// Pooled multi-granularity character vector, length d.
    pub h_c: Vec<f64>,
    /// Final-layer word states, (words × d).
    pub word_outputs: Matrix,
    /// Attention distribution of `h_c` over the word states.
    pub attention: Vec<f64>,
    /// Attention-weighted word summary h̃_w, length d.
    pub h_w_tilde: Vec<f64>,
}

/// Tape handles mirroring [`TextEncoding`] for the training path.
pub struct TapeText {
    pub h_c: NodeId,
    pub word_outputs: NodeId,
    pub attention: NodeId,
    pub h_w_tilde: NodeId,
    /// Dense expansion scores over the full index space, (1 × N).
    pub dense: NodeId,
    pub members: Vec<u32>,
}

/// The complete scoring model.
#[derive(Debug, Clone)]
pub struct DeepBowModel {
    pub store: ParamStore,
    pub char_encoder: EncoderParams,
    pub word_encoder: EncoderParams,
    pub se_head: SeHeadParams,
    pub cfg: ModelConfig,
    pub index_space: usize,
    /// Content hash of the vocabulary this model was built against.
    pub vocab_hash: String,
    pub seed: u64,
}

fn layout(
    cfg: &ModelConfig,
    index_space: usize,
) -> (ParamStore, EncoderParams, EncoderParams, SeHeadParams) {
    let mut store = ParamStore::new();
    let char_encoder = EncoderParams::register(&mut store, "char", index_space, cfg);
    let word_encoder = EncoderParams::register(&mut store, "word", index_space, cfg);
    let se_head = SeHeadParams::register(&mut store, cfg.d, index_space);
    (store, char_encoder, word_encoder, se_head)
}

impl DeepBowModel {
    /// Fresh model with seed-deterministic initialization.
    pub fn new(cfg: &ModelConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let index_space = vocab.index_space();
        let (mut store, char_encoder, word_encoder, se_head) = layout(cfg, index_space);
        store.initialize(seed);
        Ok(DeepBowModel {
            store,
            char_encoder,
            word_encoder,
            se_head,
            cfg: cfg.clone(),
            index_space,
            vocab_hash: vocab.content_hash(),
            seed,
        })
    }

    /// Tokenizes and encodes one text through both streams.
    pub fn encode_text(&self, vocab: &Vocabulary, text: &str) -> Result<TextEncoding> {
        let toks = tokenize(vocab, text, self.cfg.max_len)?;
        self.encode_tokens(toks)
    }

    /// Encodes already-tokenized text (plain forward pass).
    pub fn encode_tokens(&self, toks: TokenizedText) -> Result<TextEncoding> {
        let char_enc = encoder::encode(&self.store, &self.char_encoder, &toks.chars.tokens)?;
        let word_enc = encoder::encode(&self.store, &self.word_encoder, &toks.words.tokens)?;
        let h_c = char_enc.pooled;
        let word_outputs = word_enc.token_outputs;
        let attention = attention_pool(&h_c, &word_outputs);
        let h_w_tilde = weighted_word_summary(&attention, &word_outputs);
        Ok(TextEncoding {
            chars: toks.chars,
            words: toks.words,
            h_c,
            word_outputs,
            attention,
            h_w_tilde,
        })
    }

    /// Term-weighting BoW of an encoded text (query side of Q-Weight).
    pub fn tw_bow(&self, enc: &TextEncoding) -> Result<SparseBoW> {
        term_weighting_bow(&enc.h_c, &enc.word_outputs, &enc.words)
    }

    /// Dense synonym-expansion scores of an encoded text.
    pub fn se_dense(&self, enc: &TextEncoding) -> Result<DenseBoW> {
        synonym_expansion_dense(
            &self.store,
            &self.se_head,
            &enc.h_c,
            &enc.h_w_tilde,
            &member_set(&enc.words),
        )
    }

    /// Builds the full differentiable pipeline for one text on `tape`:
    /// both encoder streams, the attention pooling, and the gated expansion
    /// head. Mirrors the plain path operation for operation so the two
    /// agree bit for bit.
    pub fn build_on_tape(&self, tape: &mut Tape<'_>, toks: &TokenizedText) -> TapeText {
        let char_enc = encoder::encode_on_tape(tape, &self.char_encoder, &toks.chars.tokens);
        let word_enc = encoder::encode_on_tape(tape, &self.word_encoder, &toks.words.tokens);
        let h_c = char_enc.pooled;
        let word_outputs = word_enc.token_outputs;
        let scores = tape.matmul_nt(h_c, word_outputs);
        let attention = tape.softmax_rows(scores);
        let h_w_tilde = tape.matmul(attention, word_outputs);

        let head = &self.se_head;
        let members = member_set(&toks.words);
        let vc_logits = tape.linear(h_c, head.w_c, Some(head.b_c));
        let v_c = tape.sigmoid(vc_logits);
        let concat = tape.concat_cols(&[h_c, h_w_tilde]);
        let vw_logits = tape.linear_cols(concat, head.w_w, Some(head.b_w), &members);
        let v_w = tape.sigmoid(vw_logits);
        let gate_logit = tape.linear(concat, head.w_g, Some(head.b_g));
        let gate = tape.sigmoid(gate_logit);
        let dense = tape.gate_mix(v_c, v_w, gate, &members);
        TapeText {
            h_c,
            word_outputs,
            attention,
            h_w_tilde,
            dense,
            members,
        }
    }

    /// Serializes the model: magic, version, JSON layout header, raw f64
    /// little-endian values in registration order, trailing CRC32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            model: self.cfg.clone(),
            index_space: self.index_space,
            vocab_hash: self.vocab_hash.clone(),
            value_count: self.store.len(),
            tensors: self
                .store
                .metas()
                .iter()
                .map(|m| TensorRecord {
                    name: m.name.clone(),
                    rows: m.rows,
                    cols: m.cols,
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut buf =
            Vec::with_capacity(4 + 4 + 4 + header_bytes.len() + self.store.len() * 8 + 4);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_bytes);
        for &v in self.store.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    /// SHA-256 hex digest of the serialized checkpoint; the identity that
    /// precomputed stores pin.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_bytes());
        format!("{:x}", hasher.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Deserializes and cross-checks a checkpoint: CRC over the whole
    /// prefix, then the JSON layout against a freshly registered store.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let integrity = |msg: &str| DeepBowError::Integrity(format!("checkpoint: {msg}"));
        if bytes.len() < 16 {
            return Err(integrity("file shorter than any valid checkpoint"));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        let actual_crc = crc32fast::hash(body);
        if stored_crc != actual_crc {
            return Err(integrity(&format!(
                "CRC mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})"
            )));
        }
        if &body[0..4] != CHECKPOINT_MAGIC {
            return Err(integrity("bad magic (not a checkpoint file)"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(integrity(&format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let header_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
        let values_at = 12 + header_len;
        if body.len() < values_at {
            return Err(integrity("header extends past end of file"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[12..values_at])
            .map_err(|e| integrity(&format!("unreadable header: {e}")))?;
        header.model.validate()?;

        let (mut store, char_encoder, word_encoder, se_head) =
            layout(&header.model, header.index_space);
        if store.len() != header.value_count {
            return Err(integrity(&format!(
                "value count {} does not match layout ({} expected)",
                header.value_count,
                store.len()
            )));
        }
        let metas = store.metas();
        if metas.len() != header.tensors.len() {
            return Err(integrity("tensor list does not match layout"));
        }
        for (meta, rec) in metas.iter().zip(&header.tensors) {
            if meta.name != rec.name || meta.rows != rec.rows || meta.cols != rec.cols {
                return Err(integrity(&format!(
                    "tensor {} has shape {}x{}, checkpoint says {} {}x{}",
                    meta.name, meta.rows, meta.cols, rec.name, rec.rows, rec.cols
                )));
            }
        }
        let value_bytes = &body[values_at..];
        if value_bytes.len() != header.value_count * 8 {
            return Err(integrity(&format!(
                "value section is {} bytes, expected {}",
                value_bytes.len(),
                header.value_count * 8
            )));
        }
        let values: Vec<f64> = value_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.set_values(values)?;
        if !store.all_finite() {
            return Err(integrity("non-finite parameter values"));
        }
        Ok(DeepBowModel {
            store,
            char_encoder,
            word_encoder,
            se_head,
            cfg: header.model,
            index_space: header.index_space,
            vocab_hash: header.vocab_hash,
            seed: header.seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    seed: u64,
    model: ModelConfig,
    index_space: usize,
    vocab_hash: String,
    value_count: usize,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocabulary, WhitespaceSegmenter};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            layers: 2,
            heads: 2,
            ffn: 16,
            max_len: 16,
        }
    }

    fn small_vocab() -> Vocabulary {
        let corpus = [
            "aa bb cc dd",
            "aa bb cc",
            "aa bb",
            "aa ee ff",
            "gg hh aa bb",
        ];
        build_vocabulary(corpus, 8, 6, 1, &WhitespaceSegmenter).unwrap()
    }

    #[test]
    fn tokenize_builds_both_streams() {
        let vocab = small_vocab();
        let toks = tokenize(&vocab, "aa bb", 16).unwrap();
        assert_eq!(toks.chars.len(), 4);
        assert_eq!(toks.words.len(), 2);
        assert!(tokenize(&vocab, "", 16).is_err());
        assert!(tokenize(&vocab, "   ", 16).is_err());
    }

    #[test]
    fn tokenize_appends_ngrams_then_truncates() {
        let corpus = ["aa bb cc", "aa bb", "aa dd"];
        let vocab = build_vocabulary(corpus, 4, 8, 2, &WhitespaceSegmenter).unwrap();
        let toks = tokenize(&vocab, "aa bb cc", 16).unwrap();
        // Three unigrams then two bigrams, in that order.
        assert_eq!(toks.words.len(), 5);
        assert_eq!(toks.words.surfaces[3], format!("aa{}bb", '\u{1F}'));
        assert_eq!(toks.words.surfaces[4], format!("bb{}cc", '\u{1F}'));
        let clipped = tokenize(&vocab, "aa bb cc", 4).unwrap();
        assert_eq!(clipped.words.len(), 4);
        assert_eq!(clipped.chars.len(), 4);
    }

    #[test]
    fn tape_and_plain_paths_agree_bitwise() {
        let vocab = small_vocab();
        let model = DeepBowModel::new(&small_cfg(), &vocab, 11).unwrap();
        let toks = tokenize(&vocab, "aa bb cc", model.cfg.max_len).unwrap();

        let plain = model.encode_tokens(toks.clone()).unwrap();
        let dense_plain = model.se_dense(&plain).unwrap();

        let mut tape = Tape::new(&model.store);
        let taped = model.build_on_tape(&mut tape, &toks);
        assert_eq!(tape.value(taped.h_c).data, plain.h_c);
        assert_eq!(tape.value(taped.attention).data, plain.attention);
        assert_eq!(tape.value(taped.h_w_tilde).data, plain.h_w_tilde);
        assert_eq!(tape.value(taped.dense).data, dense_plain.weights);
    }

    #[test]
    fn word_stream_pooling_projections_are_inert() {
        let vocab = small_vocab();
        let mut model = DeepBowModel::new(&small_cfg(), &vocab, 5).unwrap();
        let enc = model.encode_text(&vocab, "aa bb cc").unwrap();
        let before_tw = model.tw_bow(&enc).unwrap();
        let before_dense = model.se_dense(&enc).unwrap();

        // The word stream feeds the heads only through its token states, so
        // scrambling its pooling projections must change nothing.
        for name in ["word.w_agg", "word.b_agg", "word.layer0.w_m", "word.layer1.b_m"] {
            let id = model.store.find(name).unwrap();
            for v in model.store.slice_mut(id) {
                *v += 7.5;
            }
        }
        let enc_after = model.encode_text(&vocab, "aa bb cc").unwrap();
        assert_eq!(model.tw_bow(&enc_after).unwrap(), before_tw);
        assert_eq!(model.se_dense(&enc_after).unwrap(), before_dense);

        // The character stream's pooling is load-bearing: the same nudge
        // there must move the representation.
        let id = model.store.find("char.w_agg").unwrap();
        for v in model.store.slice_mut(id) {
            *v += 0.25;
        }
        let enc_char = model.encode_text(&vocab, "aa bb cc").unwrap();
        assert_ne!(model.se_dense(&enc_char).unwrap(), before_dense);
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let vocab = small_vocab();
        let model = DeepBowModel::new(&small_cfg(), &vocab, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dbck");
        model.save(&path).unwrap();
        let loaded = DeepBowModel::load(&path).unwrap();
        assert_eq!(loaded.store.values(), model.store.values());
        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded.vocab_hash, model.vocab_hash);
        assert_eq!(loaded.seed, model.seed);
        assert_eq!(loaded.content_hash(), model.content_hash());

        // Same seed reproduces the same bytes; a different seed does not.
        let again = DeepBowModel::new(&small_cfg(), &vocab, 42).unwrap();
        assert_eq!(again.content_hash(), model.content_hash());
        let other = DeepBowModel::new(&small_cfg(), &vocab, 43).unwrap();
        assert_ne!(other.content_hash(), model.content_hash());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let vocab = small_vocab();
        let model = DeepBowModel::new(&small_cfg(), &vocab, 1).unwrap();
        let bytes = model.to_bytes();

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(
            DeepBowModel::from_bytes(&flipped),
            Err(DeepBowError::Integrity(_))
        ));

        let truncated = &bytes[..bytes.len() - 9];
        assert!(matches!(
            DeepBowModel::from_bytes(truncated),
            Err(DeepBowError::Integrity(_))
        ));

        let mut wrong_magic = bytes.clone();
        wrong_magic[0..4].copy_from_slice(b"NOPE");
        // Re-stamp the CRC so the magic check itself is what fires.
        let crc_at = wrong_magic.len() - 4;
        let crc = crc32fast::hash(&wrong_magic[..crc_at]);
        wrong_magic[crc_at..].copy_from_slice(&crc.to_le_bytes());
        match DeepBowModel::from_bytes(&wrong_magic) {
            Err(DeepBowError::Integrity(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn each_stream_owns_an_embedding_table() {
        let vocab = small_vocab();
        let model = DeepBowModel::new(&small_cfg(), &vocab, 2).unwrap();
        let c = model.store.find("char.embed").unwrap();
        let w = model.store.find("word.embed").unwrap();
        assert_ne!(c, w);
        // Independently initialized: the tables differ.
        assert_ne!(model.store.slice(c), model.store.slice(w));
        assert_eq!(model.store.meta(c).rows, vocab.index_space());
        assert_eq!(model.store.meta(w).rows, vocab.index_space());
    }
}
