//! Vocabulary construction, segmentation, and token lookup.
//!
//! The index space has two regions: dense indices `[0, v)` for the `v` most
//! frequent corpus words, and hashing buckets `[v, v+B)` that absorb
//! everything else — out-of-vocabulary words and all n-gram phrase tokens.
//! Bucketing is MD5 of the UTF-8 surface, read as a big-endian unsigned
//! integer, mod `B`; that convention is part of the on-disk contract, since
//! precomputed stores and checkpoints are only valid against the exact
//! vocabulary they were built with.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use md5::{Digest, Md5};

use crate::{DeepBowError, Result};

/// Joins the words of an n-gram into a single surface form. U+001F (unit
/// separator) cannot survive segmentation, so a literal phrase containing
/// whitespace can never collide with its n-gram token.
pub const NGRAM_SEPARATOR: char = '\u{1F}';

/// Which stream a token sequence belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Character,
    Word,
}

/// A segmented piece of text with its resolved token indices.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// Token indices in `[0, v+B)`, parallel to `surfaces`.
    pub tokens: Vec<u32>,
    /// The surface form behind each token.
    pub surfaces: Vec<String>,
    pub granularity: Granularity,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Splits text into word surfaces. Implementations are registered by id so a
/// vocabulary records how it was segmented and refuses to be mixed with a
/// different scheme.
pub trait Segmenter: Send + Sync {
    fn id(&self) -> &str;
    /// Word surfaces in order; never yields empty strings.
    fn segment<'a>(&self, text: &'a str) -> Vec<&'a str>;
}

/// Default segmenter: split on Unicode whitespace, drop empty fields.
pub struct WhitespaceSegmenter;

impl Segmenter for WhitespaceSegmenter {
    fn id(&self) -> &str {
        "whitespace"
    }

    fn segment<'a>(&self, text: &'a str) -> Vec<&'a str> {
        text.split_whitespace().collect()
    }
}

/// Looks up a segmenter by registry id.
pub fn segmenter_by_id(id: &str) -> Result<Box<dyn Segmenter>> {
    match id {
        "whitespace" => Ok(Box::new(WhitespaceSegmenter)),
        other => Err(DeepBowError::Config(format!(
            "unknown segmenter id `{other}` (registered: whitespace)"
        ))),
    }
}

/// The shared token index for both encoder streams.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, u32>,
    v: usize,
    b: usize,
    ngram_order: usize,
    segmenter_id: String,
}

impl Vocabulary {
    /// In-vocabulary word count `v`.
    pub fn v(&self) -> usize {
        self.v
    }

    /// Hashing bucket count `B`.
    pub fn b(&self) -> usize {
        self.b
    }

    /// Total index space `v + B`.
    pub fn index_space(&self) -> usize {
        self.v + self.b
    }

    pub fn ngram_order(&self) -> usize {
        self.ngram_order
    }

    pub fn segmenter_id(&self) -> &str {
        &self.segmenter_id
    }

    /// Resolves a surface form: dense index when in vocabulary, otherwise
    /// `v + (MD5(surface) as big-endian uint) % B`.
    pub fn lookup(&self, surface: &str) -> u32 {
        match self.index.get(surface) {
            Some(&idx) => idx,
            None => self.v as u32 + hash_bucket(surface, self.b),
        }
    }

    /// Surface form for a token index: the word itself, or a `‹hash:n›`
    /// placeholder for bucket tokens (many surfaces share one bucket, so the
    /// original spelling is not recoverable).
    pub fn surface(&self, token: u32) -> String {
        let t = token as usize;
        if t < self.v {
            self.words[t].clone()
        } else {
            format!("\u{2039}hash:{}\u{203A}", t - self.v)
        }
    }

    /// One token per non-whitespace Unicode scalar value.
    pub fn segment_characters(&self, text: &str) -> TokenSequence {
        let mut tokens = Vec::new();
        let mut surfaces = Vec::new();
        let mut buf = [0u8; 4];
        for ch in text.chars() {
            if ch.is_whitespace() {
                continue;
            }
            let s = ch.encode_utf8(&mut buf);
            tokens.push(self.lookup(s));
            surfaces.push(s.to_string());
        }
        TokenSequence {
            tokens,
            surfaces,
            granularity: Granularity::Character,
        }
    }

    /// Word tokens per the given segmenter.
    pub fn segment_words(&self, text: &str, segmenter: &dyn Segmenter) -> TokenSequence {
        let mut tokens = Vec::new();
        let mut surfaces = Vec::new();
        for w in segmenter.segment(text) {
            tokens.push(self.lookup(w));
            surfaces.push(w.to_string());
        }
        TokenSequence {
            tokens,
            surfaces,
            granularity: Granularity::Word,
        }
    }

    /// All contiguous n-grams of lengths `2..=order` over `words`, joined
    /// with [`NGRAM_SEPARATOR`] and resolved via [`Self::lookup`]. The
    /// caller appends the result to the unigram sequence; it never replaces
    /// it.
    pub fn extract_ngrams(&self, words: &TokenSequence, order: usize) -> TokenSequence {
        debug_assert!(order >= 2, "extract_ngrams requires order >= 2");
        let n = words.surfaces.len();
        let mut tokens = Vec::new();
        let mut surfaces = Vec::new();
        for k in 2..=order {
            if n < k {
                break;
            }
            for start in 0..=(n - k) {
                let mut joined = String::new();
                for (offset, w) in words.surfaces[start..start + k].iter().enumerate() {
                    if offset > 0 {
                        joined.push(NGRAM_SEPARATOR);
                    }
                    joined.push_str(w);
                }
                tokens.push(self.lookup(&joined));
                surfaces.push(joined);
            }
        }
        TokenSequence {
            tokens,
            surfaces,
            granularity: Granularity::Word,
        }
    }

    /// Serializes to the vocabulary file format: a header line
    /// `deepbow-vocab v=<v> B=<B> ngram=<order> seg=<id>` followed by one
    /// `<index>\t<surface>\t<frequency>` line per word in index order.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "deepbow-vocab v={} B={} ngram={} seg={}",
            self.v, self.b, self.ngram_order, self.segmenter_id
        );
        for (i, (w, f)) in self.words.iter().zip(&self.freqs).enumerate() {
            let _ = writeln!(out, "{i}\t{w}\t{f}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(self.to_file_string().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        Self::from_reader(reader)
    }

    pub fn from_reader<R: Read>(reader: BufReader<R>) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| DeepBowError::Input("empty vocabulary file".into()))??;
        let (v, b, ngram_order, segmenter_id) = parse_header(&header)?;

        let mut words = Vec::with_capacity(v);
        let mut freqs = Vec::with_capacity(v);
        let mut index = HashMap::with_capacity(v);
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let (idx, surface, freq) = match (fields.next(), fields.next(), fields.next()) {
                (Some(i), Some(s), Some(f)) => (i, s, f),
                _ => {
                    return Err(DeepBowError::Input(format!(
                        "malformed vocabulary line `{line}`"
                    )))
                }
            };
            let idx: usize = idx
                .parse()
                .map_err(|_| DeepBowError::Input(format!("bad vocabulary index `{idx}`")))?;
            if idx != words.len() {
                return Err(DeepBowError::Input(format!(
                    "vocabulary indices must be dense and ordered: expected {}, got {idx}",
                    words.len()
                )));
            }
            let freq: u64 = freq
                .parse()
                .map_err(|_| DeepBowError::Input(format!("bad vocabulary frequency `{freq}`")))?;
            if index.insert(surface.to_string(), idx as u32).is_some() {
                return Err(DeepBowError::Input(format!(
                    "duplicate vocabulary surface `{surface}`"
                )));
            }
            words.push(surface.to_string());
            freqs.push(freq);
        }
        if words.len() != v {
            return Err(DeepBowError::Input(format!(
                "vocabulary file declares v={v} but lists {} words",
                words.len()
            )));
        }
        Ok(Vocabulary {
            words,
            freqs,
            index,
            v,
            b,
            ngram_order,
            segmenter_id,
        })
    }

    /// SHA-256 of the serialized file content, hex-encoded. Checkpoints and
    /// stores embed this to refuse mixing artifacts across vocabularies.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest as _, Sha256};
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        let mut hex = String::with_capacity(64);
        for byte in digest {
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }
}

/// `MD5(surface)` as a big-endian unsigned integer, mod `b`.
fn hash_bucket(surface: &str, b: usize) -> u32 {
    let digest = Md5::digest(surface.as_bytes());
    let value = u128::from_be_bytes(digest.into());
    (value % b as u128) as u32
}

fn parse_header(header: &str) -> Result<(usize, usize, usize, String)> {
    let mut fields = header.split_whitespace();
    if fields.next() != Some("deepbow-vocab") {
        return Err(DeepBowError::Input(format!(
            "not a vocabulary file (header `{header}`)"
        )));
    }
    let mut v = None;
    let mut b = None;
    let mut ngram = None;
    let mut seg = None;
    for field in fields {
        let (key, value) = field.split_once('=').ok_or_else(|| {
            DeepBowError::Input(format!("malformed vocabulary header field `{field}`"))
        })?;
        match key {
            "v" => v = Some(parse_count(value, "v")?),
            "B" => b = Some(parse_count(value, "B")?),
            "ngram" => ngram = Some(parse_count(value, "ngram")?),
            "seg" => seg = Some(value.to_string()),
            other => {
                return Err(DeepBowError::Input(format!(
                    "unknown vocabulary header key `{other}`"
                )))
            }
        }
    }
    match (v, b, ngram, seg) {
        (Some(v), Some(b), Some(n), Some(s)) => Ok((v, b, n, s)),
        _ => Err(DeepBowError::Input(
            "vocabulary header missing one of v/B/ngram/seg".into(),
        )),
    }
}

fn parse_count(value: &str, key: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| DeepBowError::Input(format!("bad vocabulary header value {key}={value}")))
}

/// Builds the vocabulary: the `v` most frequent words across `corpus`
/// (segmented by `segmenter`), ties broken by lexicographic order of the
/// surface form, indices assigned in descending frequency order, plus `B`
/// hashing buckets.
pub fn build_vocabulary<I, S>(
    corpus: I,
    v: usize,
    b: usize,
    ngram_order: usize,
    segmenter: &dyn Segmenter,
) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if v == 0 || b == 0 {
        return Err(DeepBowError::VocabBuild(
            "v and B must both be at least 1".into(),
        ));
    }
    if ngram_order == 0 {
        return Err(DeepBowError::VocabBuild("ngram order must be ≥ 1".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut saw_text = false;
    for text in corpus {
        saw_text = true;
        for word in segmenter.segment(text.as_ref()) {
            *counts.entry(word.to_string()).or_insert(0) += 1;
        }
    }
    if !saw_text {
        return Err(DeepBowError::VocabBuild("empty corpus".into()));
    }
    if counts.len() < v {
        return Err(DeepBowError::VocabBuild(format!(
            "vocabulary shortfall: requested v={v} but corpus has only {} distinct words",
            counts.len()
        )));
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|(wa, fa), (wb, fb)| fb.cmp(fa).then_with(|| wa.cmp(wb)));
    ranked.truncate(v);

    let mut words = Vec::with_capacity(v);
    let mut freqs = Vec::with_capacity(v);
    let mut index = HashMap::with_capacity(v);
    for (i, (word, freq)) in ranked.into_iter().enumerate() {
        index.insert(word.clone(), i as u32);
        words.push(word);
        freqs.push(freq);
    }
    Ok(Vocabulary {
        words,
        freqs,
        index,
        v,
        b,
        ngram_order,
        segmenter_id: segmenter.id().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_vocab(v: usize, b: usize) -> Vocabulary {
        // "a" twice, "b" and "c" once each -> top-2 is ["a", "b"].
        build_vocabulary(["a b", "a c"], v, b, 1, &WhitespaceSegmenter).unwrap()
    }

    #[test]
    fn build_orders_by_frequency_then_surface() {
        let vocab = tiny_vocab(2, 4);
        assert_eq!(vocab.lookup("a"), 0);
        assert_eq!(vocab.lookup("b"), 1);
        // "c" lost the tie against "b" and now hashes.
        assert!(vocab.lookup("c") >= 2);
        assert!(vocab.lookup("c") < 6);
    }

    #[test]
    fn build_rejects_empty_corpus_and_shortfall() {
        let empty: [&str; 0] = [];
        assert!(build_vocabulary(empty, 1, 1, 1, &WhitespaceSegmenter).is_err());
        let err = build_vocabulary(["a b c"], 5, 4, 1, &WhitespaceSegmenter).unwrap_err();
        assert!(err.to_string().contains("shortfall"), "{err}");
    }

    #[test]
    fn oov_bucket_matches_reference_md5() {
        // Reference digests, big-endian unsigned int mod B:
        //   MD5("zzz_unseen") % 10000 = 2246
        //   MD5("a")          % 997   = 475
        //   MD5("dress")      % 64    = 48
        //   MD5("连衣裙")      % 10000 = 5939
        assert_eq!(hash_bucket("zzz_unseen", 10000), 2246);
        assert_eq!(hash_bucket("a", 997), 475);
        assert_eq!(hash_bucket("dress", 64), 48);
        assert_eq!(hash_bucket("连衣裙", 10000), 5939);
    }

    #[test]
    fn lookup_offsets_bucket_by_v() {
        let vocab = tiny_vocab(2, 10000);
        assert_eq!(vocab.lookup("zzz_unseen"), 2 + 2246);
    }

    #[test]
    fn character_segmentation_drops_whitespace() {
        let vocab = tiny_vocab(2, 4);
        let seq = vocab.segment_characters("ab c");
        assert_eq!(seq.surfaces, vec!["a", "b", "c"]);
        assert_eq!(seq.granularity, Granularity::Character);
        assert_eq!(vocab.segment_characters("连衣裙").len(), 3);
        assert!(vocab.segment_characters("").is_empty());
    }

    #[test]
    fn word_segmentation_collapses_runs_of_whitespace() {
        let vocab = tiny_vocab(2, 4);
        let seq = vocab.segment_words("red  dress", &WhitespaceSegmenter);
        assert_eq!(seq.surfaces, vec!["red", "dress"]);
    }

    #[test]
    fn ngram_tokens_use_separator_and_hash() {
        let vocab = tiny_vocab(2, 10000);
        let words = vocab.segment_words("l'oréal paris", &WhitespaceSegmenter);
        let grams = vocab.extract_ngrams(&words, 2);
        assert_eq!(grams.len(), 1);
        assert_eq!(grams.surfaces[0], "l'oréal\u{1F}paris");
        // MD5("l'oréal\u{1F}paris") % 10000 = 2390 per the reference digest
        // 7094b3d3b6f4dc1b8674868afd93acc6.
        assert_eq!(grams.tokens[0], 2 + 2390);
    }

    #[test]
    fn ngram_counts_follow_window_arithmetic() {
        let vocab = tiny_vocab(2, 16);
        let words = vocab.segment_words("a b c", &WhitespaceSegmenter);
        let grams = vocab.extract_ngrams(&words, 3);
        // bigrams ab, bc plus trigram abc
        assert_eq!(grams.surfaces.len(), 3);
        let single = vocab.segment_words("a", &WhitespaceSegmenter);
        assert!(vocab.extract_ngrams(&single, 2).is_empty());
    }

    #[test]
    fn file_round_trip_is_bit_identical() {
        let vocab = tiny_vocab(2, 4);
        let text = vocab.to_file_string();
        assert!(text.starts_with("deepbow-vocab v=2 B=4 ngram=1 seg=whitespace\n"));
        let reloaded =
            Vocabulary::from_reader(BufReader::new(text.as_bytes())).unwrap();
        assert_eq!(reloaded.to_file_string(), text);
        assert_eq!(reloaded.content_hash(), vocab.content_hash());
        assert_eq!(reloaded.lookup("a"), 0);
    }

    #[test]
    fn load_rejects_gapped_indices() {
        let bad = "deepbow-vocab v=2 B=4 ngram=1 seg=whitespace\n0\ta\t2\n2\tb\t1\n";
        let err = Vocabulary::from_reader(BufReader::new(bad.as_bytes())).unwrap_err();
        assert!(err.to_string().contains("dense"), "{err}");
    }

    #[test]
    fn unknown_segmenter_is_a_config_error() {
        assert!(segmenter_by_id("whitespace").is_ok());
        assert!(matches!(
            segmenter_by_id("jieba"),
            Err(DeepBowError::Config(_))
        ));
    }
}
