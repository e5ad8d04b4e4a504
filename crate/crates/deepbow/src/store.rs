//! Precomputed representation stores.
//!
//! A store maps text ids to their sparse BoW representations, pinned to the
//! exact vocabulary and model checkpoint that produced them via content
//! hashes. The binary layout leans on the sortedness invariant: token
//! indices are delta-encoded as LEB128 varints, so a typical posting costs
//! a byte or two plus its 32-bit weight, and any corruption is caught by a
//! trailing CRC32 before parsing begins.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::bow::{truncate, SparseBoW};
use crate::config::TruncationConfig;
use crate::model::DeepBowModel;
use crate::scoring::ScoreMode;
use crate::vocab::Vocabulary;
use crate::{DeepBowError, Result};

const STORE_MAGIC: &[u8; 4] = b"DBOW";
const STORE_VERSION: u32 = 1;

/// Which half of a scored pair a store holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Query,
    Product,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Query => "query",
            Side::Product => "product",
        })
    }
}

/// Provenance and policy recorded alongside the postings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMetadata {
    pub side: Side,
    /// How the texts were encoded: `q_weight` → term-weighting BoW,
    /// `q_synonym` → truncated synonym expansion. Product stores always
    /// use the expansion head.
    pub encoding: ScoreMode,
    pub vocab_hash: String,
    pub model_hash: String,
    pub truncation: TruncationConfig,
    pub created_unix: u64,
    /// Upper bound (exclusive) for stored token indices.
    pub index_space: u32,
}

/// Immutable id → representation map with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct BoWStore {
    pub metadata: StoreMetadata,
    entries: BTreeMap<String, SparseBoW>,
}

/// Outcome counters from a precompute run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PrecomputeStats {
    pub stored: usize,
    /// Texts with no encodable content.
    pub skipped: usize,
    /// Ids written more than once (last write wins).
    pub duplicates: usize,
}

impl BoWStore {
    pub fn new(metadata: StoreMetadata) -> Self {
        BoWStore {
            metadata,
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&SparseBoW> {
        self.entries.get(id)
    }

    /// Inserts, returning true when `id` was already present.
    pub fn insert(&mut self, id: String, bow: SparseBoW) -> bool {
        self.entries.insert(id, bow).is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &SparseBoW)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Serializes: magic, version, JSON metadata, record count, per-id
    /// postings (LEB128 lengths and index deltas, f32 LE weights), CRC32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("store metadata serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(STORE_MAGIC);
        buf.extend_from_slice(&STORE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        write_varint(&mut buf, self.entries.len() as u64);
        for (id, bow) in &self.entries {
            write_varint(&mut buf, id.len() as u64);
            buf.extend_from_slice(id.as_bytes());
            write_varint(&mut buf, bow.len() as u64);
            let mut previous = 0u32;
            for (i, &(token, _)) in bow.entries().iter().enumerate() {
                let delta = if i == 0 { token } else { token - previous };
                write_varint(&mut buf, delta as u64);
                previous = token;
            }
            for &(_, w) in bow.entries() {
                buf.extend_from_slice(&w.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, msg: &str| {
            DeepBowError::Integrity(format!("store at offset {offset}: {msg}"))
        };
        if bytes.len() < 16 {
            return Err(fail(bytes.len(), "file shorter than any valid store"));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        let actual_crc = crc32fast::hash(body);
        if stored_crc != actual_crc {
            return Err(fail(
                body.len(),
                &format!("CRC mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})"),
            ));
        }
        if &body[0..4] != STORE_MAGIC {
            return Err(fail(0, "bad magic (not a store file)"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(fail(
                4,
                &format!("unsupported version {version} (expected {STORE_VERSION})"),
            ));
        }
        let meta_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
        let mut cursor = 12usize;
        let meta_bytes = body
            .get(cursor..cursor + meta_len)
            .ok_or_else(|| fail(cursor, "metadata extends past end of file"))?;
        let metadata: StoreMetadata = serde_json::from_slice(meta_bytes)
            .map_err(|e| fail(cursor, &format!("unreadable metadata: {e}")))?;
        cursor += meta_len;

        let count = read_varint(body, &mut cursor)? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let record_at = cursor;
            let id_len = read_varint(body, &mut cursor)? as usize;
            let id_bytes = body
                .get(cursor..cursor + id_len)
                .ok_or_else(|| fail(cursor, "id extends past end of file"))?;
            let id = std::str::from_utf8(id_bytes)
                .map_err(|_| fail(cursor, "id is not valid UTF-8"))?
                .to_string();
            cursor += id_len;
            let n = read_varint(body, &mut cursor)? as usize;
            let mut tokens = Vec::with_capacity(n);
            let mut previous = 0u32;
            for i in 0..n {
                let at = cursor;
                let delta = read_varint(body, &mut cursor)?;
                if i > 0 && delta == 0 {
                    return Err(fail(at, &format!("non-ascending index in `{id}`")));
                }
                let token = if i == 0 {
                    delta
                } else {
                    previous as u64 + delta
                };
                if token >= metadata.index_space as u64 {
                    return Err(fail(
                        at,
                        &format!(
                            "token {token} in `{id}` outside index space {}",
                            metadata.index_space
                        ),
                    ));
                }
                previous = token as u32;
                tokens.push(previous);
            }
            let weights_at = cursor;
            let weight_bytes = body
                .get(cursor..cursor + 4 * n)
                .ok_or_else(|| fail(weights_at, "weights extend past end of file"))?;
            cursor += 4 * n;
            let mut pairs = Vec::with_capacity(n);
            for (i, chunk) in weight_bytes.chunks_exact(4).enumerate() {
                let w = f32::from_le_bytes(chunk.try_into().unwrap());
                if !(w.is_finite() && w > 0.0) {
                    return Err(fail(
                        weights_at + 4 * i,
                        &format!("non-positive weight {w} in `{id}`"),
                    ));
                }
                pairs.push((tokens[i], w));
            }
            let bow = SparseBoW::new(pairs)
                .map_err(|e| fail(record_at, &format!("invalid postings for `{id}`: {e}")))?;
            if entries.insert(id.clone(), bow).is_some() {
                return Err(fail(record_at, &format!("duplicate id `{id}`")));
            }
        }
        if cursor != body.len() {
            return Err(fail(cursor, "trailing bytes after last record"));
        }
        Ok(BoWStore { metadata, entries })
    }
}

fn write_varint(buf: &mut Vec<u8>, mut value: u64) {
    loop {
        let byte = (value & 0x7f) as u8;
        value >>= 7;
        if value == 0 {
            buf.push(byte);
            break;
        }
        buf.push(byte | 0x80);
    }
}

fn read_varint(bytes: &[u8], cursor: &mut usize) -> Result<u64> {
    let start = *cursor;
    let mut value = 0u64;
    let mut shift = 0u32;
    loop {
        let &byte = bytes.get(*cursor).ok_or_else(|| {
            DeepBowError::Integrity(format!("store at offset {start}: truncated varint"))
        })?;
        *cursor += 1;
        if shift >= 63 && byte > 1 {
            return Err(DeepBowError::Integrity(format!(
                "store at offset {start}: varint overflows 64 bits"
            )));
        }
        value |= u64::from(byte & 0x7f) << shift;
        if byte & 0x80 == 0 {
            return Ok(value);
        }
        shift += 7;
    }
}

/// Keeps the `k` largest entries of an already-sparse vector (ties toward
/// the smaller index), or those ≥ τ — the sparse analog of dense
/// truncation, for representations that never materialize densely.
pub fn truncate_sparse(bow: &SparseBoW, policy: &TruncationConfig) -> SparseBoW {
    match *policy {
        TruncationConfig::Topk { k } => {
            let mut entries: Vec<(u32, f32)> = bow.entries().to_vec();
            entries.sort_by(|(ta, wa), (tb, wb)| {
                wb.partial_cmp(wa)
                    .expect("finite weights")
                    .then_with(|| ta.cmp(tb))
            });
            entries.truncate(k);
            entries.sort_by_key(|&(t, _)| t);
            SparseBoW::new(entries).expect("truncation preserves invariants")
        }
        TruncationConfig::Threshold { tau } => SparseBoW::new(
            bow.entries()
                .iter()
                .copied()
                .filter(|&(_, w)| f64::from(w) >= tau)
                .collect(),
        )
        .expect("truncation preserves invariants"),
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Encodes a corpus of (id, text) pairs into a store. Queries encode
/// through the term-weighting head (`q_weight`) or the expansion head
/// (`q_synonym`); products always expand. The model must have been built
/// against this exact vocabulary (hash check). Unencodable texts are
/// skipped and counted; duplicate ids keep the last text seen.
pub fn precompute<I, S>(
    model: &DeepBowModel,
    vocab: &Vocabulary,
    texts: I,
    side: Side,
    mode: ScoreMode,
    truncation: &TruncationConfig,
) -> Result<(BoWStore, PrecomputeStats)>
where
    I: IntoIterator<Item = (S, S)>,
    S: Into<String>,
{
    let vocab_hash = vocab.content_hash();
    if model.vocab_hash != vocab_hash {
        return Err(DeepBowError::Mismatch(format!(
            "model was built against vocabulary {}, not {}",
            &model.vocab_hash[..12.min(model.vocab_hash.len())],
            &vocab_hash[..12]
        )));
    }
    let metadata = StoreMetadata {
        side,
        encoding: match side {
            Side::Query => mode,
            Side::Product => ScoreMode::QSynonym,
        },
        vocab_hash,
        model_hash: model.content_hash(),
        truncation: *truncation,
        created_unix: unix_now(),
        index_space: model.index_space as u32,
    };
    let mut store = BoWStore::new(metadata);
    let mut stats = PrecomputeStats::default();
    for (id, text) in texts {
        let id: String = id.into();
        let text: String = text.into();
        let enc = match model.encode_text(vocab, &text) {
            Ok(enc) => enc,
            Err(DeepBowError::Input(_)) => {
                stats.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let bow = match store.metadata.encoding {
            ScoreMode::QWeight => truncate_sparse(&model.tw_bow(&enc)?, truncation),
            ScoreMode::QSynonym => truncate(&model.se_dense(&enc)?, truncation),
        };
        if store.insert(id, bow) {
            stats.duplicates += 1;
        }
        stats.stored += 1;
    }
    stats.stored = store.len();
    Ok((store, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::vocab::{build_vocabulary, WhitespaceSegmenter};

    fn metadata(side: Side) -> StoreMetadata {
        StoreMetadata {
            side,
            encoding: ScoreMode::QSynonym,
            vocab_hash: "v".repeat(64),
            model_hash: "m".repeat(64),
            truncation: TruncationConfig::Threshold { tau: 0.4 },
            created_unix: 1_700_000_000,
            index_space: 1000,
        }
    }

    fn sample_store() -> BoWStore {
        let mut store = BoWStore::new(metadata(Side::Product));
        store.insert(
            "p1".into(),
            SparseBoW::new(vec![(0, 0.5), (7, 0.9), (900, 0.41)]).unwrap(),
        );
        store.insert("p2".into(), SparseBoW::empty());
        store.insert("p3".into(), SparseBoW::new(vec![(42, 1.0)]).unwrap());
        store
    }

    #[test]
    fn round_trip_is_identity() {
        let store = sample_store();
        let loaded = BoWStore::from_bytes(&store.to_bytes()).unwrap();
        assert_eq!(loaded, store);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("products.dbow");
        store.save(&path).unwrap();
        assert_eq!(BoWStore::load(&path).unwrap(), store);
    }

    #[test]
    fn empty_store_round_trips_with_metadata() {
        let store = BoWStore::new(metadata(Side::Query));
        let loaded = BoWStore::from_bytes(&store.to_bytes()).unwrap();
        assert!(loaded.is_empty());
        assert_eq!(loaded.metadata, store.metadata);
    }

    #[test]
    fn corruption_is_reported_with_offset() {
        let bytes = sample_store().to_bytes();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x01;
        match BoWStore::from_bytes(&flipped) {
            Err(DeepBowError::Integrity(msg)) => {
                assert!(msg.contains("offset"), "message: {msg}");
                assert!(msg.contains("CRC"), "message: {msg}");
            }
            other => panic!("expected integrity error, got {other:?}"),
        }
        assert!(matches!(
            BoWStore::from_bytes(&bytes[..bytes.len() - 7]),
            Err(DeepBowError::Integrity(_))
        ));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = sample_store().to_bytes();
        bytes[4] = 99;
        let crc_at = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..crc_at]);
        bytes[crc_at..].copy_from_slice(&crc.to_le_bytes());
        match BoWStore::from_bytes(&bytes) {
            Err(DeepBowError::Integrity(msg)) => {
                assert!(msg.contains("version 99"), "message: {msg}")
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn sparse_truncation_mirrors_dense_rules() {
        let bow = SparseBoW::new(vec![(1, 0.9), (5, 0.1), (9, 0.9)]).unwrap();
        let top = truncate_sparse(&bow, &TruncationConfig::Topk { k: 2 });
        assert_eq!(
            top.entries().iter().map(|&(t, _)| t).collect::<Vec<_>>(),
            vec![1, 9]
        );
        let thresholded = truncate_sparse(&bow, &TruncationConfig::Threshold { tau: 0.4 });
        assert_eq!(thresholded.len(), 2);
        assert!(truncate_sparse(&bow, &TruncationConfig::Threshold { tau: 0.95 }).is_empty());
    }

    fn fixture() -> (DeepBowModel, Vocabulary) {
        let corpus = ["red dress", "blue shoe", "red shoe", "green hat dress"];
        let vocab = build_vocabulary(corpus, 6, 5, 1, &WhitespaceSegmenter).unwrap();
        let cfg = ModelConfig {
            d: 8,
            layers: 1,
            heads: 2,
            ffn: 16,
            max_len: 16,
        };
        let model = DeepBowModel::new(&cfg, &vocab, 13).unwrap();
        (model, vocab)
    }

    #[test]
    fn precompute_encodes_counts_and_pins_hashes() {
        let (model, vocab) = fixture();
        let texts = vec![
            ("p1", "red dress"),
            ("p2", "   "),
            ("p1", "blue shoe"),
            ("p3", "green hat"),
        ];
        let policy = TruncationConfig::Threshold { tau: 0.4 };
        let (store, stats) = precompute(
            &model,
            &vocab,
            texts,
            Side::Product,
            ScoreMode::QSynonym,
            &policy,
        )
        .unwrap();
        assert_eq!(stats.stored, 2);
        assert_eq!(stats.skipped, 1);
        assert_eq!(stats.duplicates, 1);
        assert_eq!(store.metadata.vocab_hash, vocab.content_hash());
        assert_eq!(store.metadata.model_hash, model.content_hash());
        // Threshold policy: every stored weight clears τ.
        for (_, bow) in store.iter() {
            for &(_, w) in bow.entries() {
                assert!(w >= 0.4);
            }
        }
        // Last write wins for p1.
        let enc = model.encode_text(&vocab, "blue shoe").unwrap();
        let expected = truncate(&model.se_dense(&enc).unwrap(), &policy);
        assert_eq!(store.get("p1").unwrap(), &expected);
    }

    #[test]
    fn precompute_refuses_mismatched_vocabulary() {
        let (model, _) = fixture();
        let other_vocab =
            build_vocabulary(["aa bb", "cc aa"], 3, 5, 1, &WhitespaceSegmenter).unwrap();
        let result = precompute(
            &model,
            &other_vocab,
            vec![("q", "aa")],
            Side::Query,
            ScoreMode::QWeight,
            &TruncationConfig::Topk { k: 8 },
        );
        assert!(matches!(result, Err(DeepBowError::Mismatch(_))));
    }

    #[test]
    fn query_store_modes_choose_the_head() {
        let (model, vocab) = fixture();
        let policy = TruncationConfig::Topk { k: 64 };
        let (tw_store, _) = precompute(
            &model,
            &vocab,
            vec![("q", "red dress")],
            Side::Query,
            ScoreMode::QWeight,
            &policy,
        )
        .unwrap();
        let enc = model.encode_text(&vocab, "red dress").unwrap();
        assert_eq!(tw_store.get("q").unwrap(), &model.tw_bow(&enc).unwrap());

        let (se_store, _) = precompute(
            &model,
            &vocab,
            vec![("q", "red dress")],
            Side::Query,
            ScoreMode::QSynonym,
            &policy,
        )
        .unwrap();
        let expected = truncate(&model.se_dense(&enc).unwrap(), &policy);
        assert_eq!(se_store.get("q").unwrap(), &expected);
        assert_ne!(tw_store.get("q").unwrap(), se_store.get("q").unwrap());
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    fn arbitrary_store() -> impl Strategy<Value = BoWStore> {
        let bow = proptest::collection::btree_map(0u32..1000, 0.01f32..1.0, 0..32)
            .prop_map(|m| SparseBoW::new(m.into_iter().collect()).unwrap());
        proptest::collection::btree_map("[a-z0-9_]{1,12}", bow, 0..24).prop_map(|entries| {
            let mut store = BoWStore::new(StoreMetadata {
                side: Side::Product,
                encoding: ScoreMode::QSynonym,
                vocab_hash: "h".repeat(64),
                model_hash: "g".repeat(64),
                truncation: TruncationConfig::Topk { k: 128 },
                created_unix: 1_700_000_000,
                index_space: 1000,
            });
            for (id, bow) in entries {
                store.insert(id, bow);
            }
            store
        })
    }

    proptest! {
        #[test]
        fn random_stores_round_trip(store in arbitrary_store()) {
            let loaded = BoWStore::from_bytes(&store.to_bytes()).unwrap();
            prop_assert_eq!(loaded, store);
        }
    }
}
