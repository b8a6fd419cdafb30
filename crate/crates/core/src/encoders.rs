//! Scorer and embedder interfaces plus deterministic reference
//! implementations. Neural models stay out of process: their outputs enter
//! as embedding stores or score tables.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingStore;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::textnorm::{content_tokens, normalize_token, tokens, Stopwords};

static DEFAULT_STOPWORDS: LazyLock<Stopwords> = LazyLock::new(Stopwords::default);

/// Text → unit-norm vector of fixed dimension.
pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f32>;
}

/// Image key → precomputed unit-norm vector, `None` when the key is unknown.
pub trait ImageEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn image(&self, key: &str) -> Option<&[f32]>;
}

impl ImageEmbedder for EmbeddingStore {
    fn dim(&self) -> usize {
        EmbeddingStore::dim(self)
    }

    fn image(&self, key: &str) -> Option<&[f32]> {
        self.get(key)
    }
}

/// Inputs to a (mention, entity) cross score. Table-backed scorers use the
/// ids; text scorers use the texts.
#[derive(Debug, Clone, Copy)]
pub struct CrossPair<'a> {
    pub review_id: &'a str,
    pub entity_id: &'a str,
    pub mention: &'a str,
    pub entity_text: &'a str,
}

pub trait CrossScorer: Send + Sync {
    fn cross_score(&self, pair: &CrossPair<'_>) -> f64;
}

/// One entailment query. `attribute_key` is `None` for the entity
/// description pair.
#[derive(Debug, Clone, Copy)]
pub struct EntailmentPair<'a> {
    pub review_id: &'a str,
    pub entity_id: &'a str,
    pub attribute_key: Option<&'a str>,
    pub mention: &'a str,
    pub review_text: &'a str,
    pub hypothesis: &'a str,
}

pub trait PairEntailmentScorer: Send + Sync {
    /// Score in `[0, 1]`.
    fn entail(&self, pair: &EntailmentPair<'_>) -> f64;
}

// ---------------------------------------------------------------------------
// Feature hashing
// ---------------------------------------------------------------------------

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn feature_hash(feature: &str, seed: u64) -> u64 {
    let mut h = FNV_OFFSET ^ splitmix64(seed);
    for b in feature.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

/// Signed feature hashing of normalized unigrams and bigrams, L2-normalized.
/// A text with no features (or whose features cancel) maps to `e₁`.
pub fn hash_embed(text: &str, dim: usize, seed: u64) -> Result<Vec<f32>> {
    if dim < 64 || !dim.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "hash embedding dim must be a power of two ≥ 64, got {dim}"
        )));
    }
    let toks: Vec<String> = tokens(text)
        .iter()
        .map(|t| normalize_token(&t.text))
        .collect();
    let mut acc = vec![0.0f64; dim];
    let mut add = |feature: &str| {
        let h = feature_hash(feature, seed);
        let bucket = (h & (dim as u64 - 1)) as usize;
        acc[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    };
    for t in &toks {
        add(t);
    }
    for pair in toks.windows(2) {
        add(&format!("{}\u{1f}{}", pair[0], pair[1]));
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut e1 = vec![0.0f32; dim];
        e1[0] = 1.0;
        return Ok(e1);
    }
    Ok(acc.iter().map(|x| (x / norm) as f32).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        hash_embed("", dim, seed)?;
        Ok(Self { dim, seed })
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 256, seed: 0 }
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        hash_embed(text, self.dim, self.seed).expect("dim validated at construction")
    }
}

// ---------------------------------------------------------------------------
// Lexical reference scorers
// ---------------------------------------------------------------------------

fn normalized_set(text: &str) -> BTreeSet<String> {
    tokens(text).iter().map(|t| normalize_token(&t.text)).collect()
}

/// Fraction of the mention's normalized tokens present in the entity text.
pub fn lexical_cross_score(mention_text: &str, entity_text: &str) -> f64 {
    let mention = normalized_set(mention_text);
    let entity = normalized_set(entity_text);
    let hits = mention.intersection(&entity).count();
    hits as f64 / mention.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalCrossScorer;

impl CrossScorer for LexicalCrossScorer {
    fn cross_score(&self, pair: &CrossPair<'_>) -> f64 {
        lexical_cross_score(pair.mention, pair.entity_text)
    }
}

/// `the {key} of this {mention} is {value}`, lowercased.
pub fn attribute_hypothesis(mention_surface: &str, attribute_key: &str, value: &str) -> String {
    format!("the {attribute_key} of this {mention_surface} is {value}").to_lowercase()
}

/// Recovers the value slot of a templated hypothesis; a free-form
/// hypothesis (a description) is returned whole.
fn hypothesis_value<'h>(mention: &str, hypothesis: &'h str) -> &'h str {
    let marker = format!(" of this {} is ", mention.to_lowercase());
    match hypothesis.find(&marker) {
        Some(pos) if hypothesis.starts_with("the ") => &hypothesis[pos + marker.len()..],
        _ => hypothesis,
    }
}

fn entailment_score(stopwords: &Stopwords, mention: &str, review_text: &str, hypothesis: &str) -> f64 {
    let value = hypothesis_value(mention, hypothesis);
    let mut value_tokens: BTreeSet<String> = content_tokens(value, stopwords)
        .into_iter()
        .map(|t| t.0)
        .collect();
    if value_tokens.is_empty() {
        value_tokens = normalized_set(value);
    }
    if value_tokens.is_empty() {
        return 0.0;
    }
    let review = normalized_set(review_text);
    value_tokens.iter().filter(|t| review.contains(*t)).count() as f64 / value_tokens.len() as f64
}

/// Containment of the hypothesis value's content tokens in the review.
pub fn lexical_entailment(mention: &str, review_text: &str, hypothesis: &str) -> f64 {
    entailment_score(&DEFAULT_STOPWORDS, mention, review_text, hypothesis)
}

#[derive(Debug, Clone, Default)]
pub struct LexicalEntailment {
    stopwords: Stopwords,
}

impl LexicalEntailment {
    pub fn new(stopwords: Stopwords) -> Self {
        Self { stopwords }
    }
}

impl PairEntailmentScorer for LexicalEntailment {
    fn entail(&self, pair: &EntailmentPair<'_>) -> f64 {
        entailment_score(&self.stopwords, pair.mention, pair.review_text, pair.hypothesis)
    }
}

// ---------------------------------------------------------------------------
// Score tables
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub left_key: String,
    pub right_key: String,
    pub score: f64,
}

/// Scores computed elsewhere, keyed by `(left_key, right_key)`.
///
/// As a [`CrossScorer`] the keys are `(review_id, entity_id)`. As a
/// [`PairEntailmentScorer`] the right key is the entity id for the
/// description pair and `{entity_id}/{attribute_key}` for attribute pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    scores: HashMap<(String, String), f64>,
    default: f64,
}

impl ScoreTable {
    pub fn new(default: f64) -> Self {
        Self {
            scores: HashMap::new(),
            default,
        }
    }

    /// Later inserts replace earlier ones.
    pub fn insert(&mut self, left: impl Into<String>, right: impl Into<String>, score: f64) {
        self.scores.insert((left.into(), right.into()), score);
    }

    pub fn get(&self, left: &str, right: &str) -> f64 {
        // HashMap<(String, String)> cannot be probed with borrowed pairs.
        self.scores
            .get(&(left.to_string(), right.to_string()))
            .copied()
            .unwrap_or(self.default)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn records(&self) -> Vec<ScoreRecord> {
        let mut out: Vec<ScoreRecord> = self
            .scores
            .iter()
            .map(|((l, r), &score)| ScoreRecord {
                left_key: l.clone(),
                right_key: r.clone(),
                score,
            })
            .collect();
        out.sort_by(|a, b| (&a.left_key, &a.right_key).cmp(&(&b.left_key, &b.right_key)));
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        jsonl::write(path, &self.records())
    }

    pub fn entailment_key(entity_id: &str, attribute_key: Option<&str>) -> String {
        match attribute_key {
            Some(k) => format!("{entity_id}/{k}"),
            None => entity_id.to_string(),
        }
    }
}

/// Loads a score table; missing pairs score `default`.
pub fn load_scored_pairs(path: &Path, default: f64) -> Result<ScoreTable> {
    let mut table = ScoreTable::new(default);
    for (idx, rec) in jsonl::read::<ScoreRecord>(path)?.into_iter().enumerate() {
        if !rec.score.is_finite() {
            return Err(Error::parse(path, idx + 1, "non-finite score"));
        }
        table.insert(rec.left_key, rec.right_key, rec.score);
    }
    Ok(table)
}

impl CrossScorer for ScoreTable {
    fn cross_score(&self, pair: &CrossPair<'_>) -> f64 {
        self.get(pair.review_id, pair.entity_id)
    }
}

impl PairEntailmentScorer for ScoreTable {
    fn entail(&self, pair: &EntailmentPair<'_>) -> f64 {
        self.get(
            pair.review_id,
            &Self::entailment_key(pair.entity_id, pair.attribute_key),
        )
        .clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::cosine;

    #[test]
    fn hash_embed_identity_and_unit_norm() {
        let a = hash_embed("Acme Laptop 15 with 16GB memory", 256, 3).unwrap();
        let b = hash_embed("Acme Laptop 15 with 16GB memory", 256, 3).unwrap();
        assert_eq!(a, b);
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-12);
        let norm: f64 = a.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn hash_embed_empty_is_first_basis_vector() {
        let e = hash_embed("", 64, 0).unwrap();
        assert_eq!(e[0], 1.0);
        assert!(e[1..].iter().all(|&x| x == 0.0));
        assert_eq!(hash_embed("?!", 64, 9).unwrap(), e);
    }

    #[test]
    fn hash_embed_rejects_bad_dims() {
        assert!(hash_embed("x", 32, 0).is_err());
        assert!(hash_embed("x", 100, 0).is_err());
    }

    #[test]
    fn lexical_cross_score_examples() {
        assert_eq!(lexical_cross_score("acme laptop", "Acme Laptop 15 silver"), 1.0);
        assert_eq!(lexical_cross_score("phone", "Acme Laptop"), 0.0);
        assert_eq!(lexical_cross_score("red acme gas range", "Acme Ranges black"), 0.5);
        assert_eq!(lexical_cross_score("", "anything"), 0.0);
    }

    #[test]
    fn hypothesis_template() {
        assert_eq!(attribute_hypothesis("bag", "color", "pink"), "the color of this bag is pink");
        assert_eq!(
            attribute_hypothesis("laptop", "System Memory", "16GB"),
            "the system memory of this laptop is 16gb"
        );
        assert_eq!(attribute_hypothesis("tv", "brand", "acme"), "the brand of this tv is acme");
    }

    #[test]
    fn lexical_entailment_examples() {
        let h = attribute_hypothesis("bag", "color", "pink");
        assert_eq!(lexical_entailment("bag", "it is more of a light pink", &h), 1.0);
        let h = attribute_hypothesis("bag", "color", "black");
        assert_eq!(lexical_entailment("bag", "it is more of a light pink", &h), 0.0);
        let h = attribute_hypothesis("bag", "color", "gray pink");
        assert_eq!(lexical_entailment("bag", "nice pink bag", &h), 0.5);
    }

    #[test]
    fn value_containing_is_keeps_whole_value() {
        let h = attribute_hypothesis("shirt", "slogan", "this is fine");
        assert_eq!(hypothesis_value("shirt", &h), "this is fine");
        assert_eq!(lexical_entailment("shirt", "printed fine", &h), 1.0);
    }

    #[test]
    fn score_table_lookup_and_default() {
        let mut table = ScoreTable::new(0.0);
        table.insert("r1", "e1", 0.9);
        let pair = CrossPair {
            review_id: "r1",
            entity_id: "e1",
            mention: "",
            entity_text: "",
        };
        assert_eq!(table.cross_score(&pair), 0.9);
        assert_eq!(table.get("r1", "e2"), 0.0);
    }

    #[test]
    fn score_table_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.jsonl");
        let mut table = ScoreTable::new(0.0);
        table.insert("r1", "e1", 0.9);
        table.insert("r1", "e1/color", 0.25);
        table.write(&path).unwrap();
        assert_eq!(load_scored_pairs(&path, 0.0).unwrap(), table);

        std::fs::write(&path, "{\"left_key\":\"a\",\"right_key\":\"b\",\"score\":1}\n{oops}\n")
            .unwrap();
        let err = load_scored_pairs(&path, 0.0).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
