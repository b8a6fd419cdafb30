//! Knowledge-base and review data model, JSONL ingestion, and the `AMEV1`
//! binary embedding store.
//!
//! Entities are kept in a `BTreeMap` keyed by id so every downstream
//! iteration (and therefore every tie-break) follows entity-id order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

/// Attribute key under which every entity carries its own title.
pub const NAME_ATTRIBUTE: &str = "name";

/// Default token ceiling for review ingestion.
pub const MAX_REVIEW_TOKENS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
    pub categories: Vec<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    #[serde(default)]
    pub image_ids: Vec<String>,
}

impl Entity {
    /// Most specific category (last in the path).
    pub fn leaf_category(&self) -> &str {
        self.categories.last().map(String::as_str).unwrap_or("")
    }

    /// Only the first image takes part in scoring.
    pub fn first_image(&self) -> Option<&str> {
        self.image_ids.first().map(String::as_str)
    }

    /// Title and description joined, as embedded for stage-one retrieval.
    pub fn retrieval_text(&self) -> String {
        if self.description.is_empty() {
            self.title.clone()
        } else {
            format!("{} {}", self.title, self.description)
        }
    }
}

/// A mention span. `start`/`end` are character (not byte) offsets into the
/// review text, end-exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionSpan {
    pub surface: String,
    pub start: usize,
    pub end: usize,
}

impl MentionSpan {
    pub fn is_valid_for(&self, text: &str) -> bool {
        self.start <= self.end && char_slice(text, self.start, self.end) == Some(self.surface.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub review_id: String,
    pub text: String,
    #[serde(default)]
    pub mention: Option<MentionSpan>,
    #[serde(default)]
    pub image_ids: Vec<String>,
    #[serde(default)]
    pub gold_entity_id: Option<String>,
    /// Attribute pairs found in the review. May be pre-filled upstream by
    /// richer extractors; the built-in matcher only adds missing keys.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extracted_attributes: BTreeMap<String, String>,
}

impl Review {
    pub fn first_image(&self) -> Option<&str> {
        self.image_ids.first().map(String::as_str)
    }

    pub fn mention_surface(&self) -> Option<&str> {
        self.mention.as_ref().map(|m| m.surface.as_str())
    }

    pub fn token_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

/// Substring by character offsets; `None` when out of range.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let begin = indices.nth(start)?;
    let finish = if end == start {
        begin
    } else {
        indices.nth(end - start - 1)?
    };
    Some(&text[begin..finish])
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    entities: BTreeMap<String, Entity>,
    category_vocabulary: BTreeSet<String>,
    attribute_vocabulary: BTreeMap<String, BTreeSet<String>>,
}

impl KnowledgeBase {
    /// Builds a KB, injecting the `name` attribute where missing.
    pub fn from_entities(entities: impl IntoIterator<Item = Entity>) -> Result<Self> {
        let mut kb = KnowledgeBase::default();
        for entity in entities {
            kb.insert(entity)?;
        }
        Ok(kb)
    }

    fn insert(&mut self, mut entity: Entity) -> Result<()> {
        if entity.categories.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "entity `{}` has no categories",
                entity.entity_id
            )));
        }
        if self.entities.contains_key(&entity.entity_id) {
            return Err(Error::DuplicateEntity(entity.entity_id));
        }
        entity
            .attributes
            .insert(NAME_ATTRIBUTE.to_string(), entity.title.clone());
        self.category_vocabulary
            .extend(entity.categories.iter().cloned());
        for (k, v) in &entity.attributes {
            self.attribute_vocabulary
                .entry(k.clone())
                .or_default()
                .insert(v.clone());
        }
        self.entities.insert(entity.entity_id.clone(), entity);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Entity> {
        self.entities.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entities.contains_key(id)
    }

    /// Entities in ascending id order.
    pub fn entities(&self) -> impl ExactSizeIterator<Item = &Entity> + '_ {
        self.entities.values()
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn category_vocabulary(&self) -> &BTreeSet<String> {
        &self.category_vocabulary
    }

    pub fn attribute_vocabulary(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.attribute_vocabulary
    }
}

/// Loads `entities.jsonl`.
pub fn load_kb(path: &Path) -> Result<KnowledgeBase> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kb = KnowledgeBase::default();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entity: Entity =
            serde_json::from_str(line).map_err(|e| Error::parse(path, idx + 1, e))?;
        match kb.insert(entity) {
            Err(Error::InvalidArgument(msg)) => return Err(Error::parse(path, idx + 1, msg)),
            other => other?,
        }
    }
    Ok(kb)
}

pub fn write_kb(kb: &KnowledgeBase, path: &Path) -> Result<()> {
    jsonl::write(path, kb.entities())
}

#[derive(Debug, Clone, Default)]
pub struct LoadedReviews {
    pub reviews: Vec<Review>,
    /// Reviews dropped for exceeding the token ceiling, in file order.
    pub too_long: Vec<Review>,
}

impl LoadedReviews {
    pub fn dropped(&self) -> usize {
        self.too_long.len()
    }
}

/// Loads `reviews.jsonl`, dropping reviews with more than `max_tokens`
/// whitespace tokens.
pub fn load_reviews(path: &Path, max_tokens: usize) -> Result<LoadedReviews> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = LoadedReviews::default();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let review: Review =
            serde_json::from_str(line).map_err(|e| Error::parse(path, idx + 1, e))?;
        if let Some(m) = &review.mention {
            if !m.is_valid_for(&review.text) {
                return Err(Error::parse(
                    path,
                    idx + 1,
                    format!("mention span {}..{} does not match `{}`", m.start, m.end, m.surface),
                ));
            }
        }
        if review.token_count() > max_tokens {
            out.too_long.push(review);
        } else {
            out.reviews.push(review);
        }
    }
    Ok(out)
}

pub fn write_reviews(reviews: &[Review], path: &Path) -> Result<()> {
    jsonl::write(path, reviews)
}

// ---------------------------------------------------------------------------
// Embedding store
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 5] = b"AMEV1";
const NORM_TOLERANCE: f64 = 1e-5;

/// Keyed collection of fixed-dimension `f32` vectors.
///
/// Layout on disk: magic `AMEV1`, u32 dim, u64 count, u8 normalized flag,
/// then per row a u16 key length, the UTF-8 key, and `dim` f32 values; all
/// integers and floats little-endian. Rows are written in key order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    normalized: bool,
    rows: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, normalized: bool) -> Result<Self> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!("embedding dim {dim}")));
        }
        Ok(Self {
            dim,
            normalized,
            rows: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.rows.contains_key(key)
    }

    /// Rows in ascending key order.
    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&str, &[f32])> + '_ {
        self.rows.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Inserts or replaces a row. Normalized stores reject non-unit vectors.
    pub fn insert(&mut self, key: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let key = key.into();
        if key.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "key of {} bytes exceeds u16 length prefix",
                key.len()
            )));
        }
        self.check_row(&key, &vector)
            .map_err(|e| match e {
                Error::Corruption(msg) => Error::InvalidArgument(msg),
                other => other,
            })?;
        self.rows.insert(key, vector);
        Ok(())
    }

    fn check_row(&self, key: &str, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        if self.normalized {
            let norm = l2_norm(vector);
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Corruption(format!(
                    "row `{key}` has norm {norm} in a normalized store"
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(18 + self.rows.len() * (8 + 4 * self.dim));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.rows.len() as u64).to_le_bytes());
        buf.push(u8::from(self.normalized));
        for (key, vector) in &self.rows {
            buf.extend_from_slice(&(key.len() as u16).to_le_bytes());
            buf.extend_from_slice(key.as_bytes());
            for x in vector {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("missing AMEV1 magic".into()));
        }
        let mut cur = Cursor {
            bytes,
            pos: MAGIC.len(),
        };
        let dim = u32::from_le_bytes(cur.take()?) as usize;
        let count = u64::from_le_bytes(cur.take()?);
        let normalized = match cur.take::<1>()?[0] {
            0 => false,
            1 => true,
            other => return Err(Error::Corruption(format!("normalized flag {other}"))),
        };
        if dim == 0 {
            return Err(Error::Corruption("header dim is 0".into()));
        }
        let mut store = EmbeddingStore::new(dim, normalized)?;
        for row in 0..count {
            let key_len = u16::from_le_bytes(cur.take()?) as usize;
            let key = std::str::from_utf8(cur.slice(key_len)?)
                .map_err(|_| Error::Corruption(format!("row {row}: key is not UTF-8")))?
                .to_string();
            let payload = cur.slice(dim * 4).map_err(|_| {
                Error::Corruption(format!(
                    "row {row} (`{key}`): payload shorter than header dim {dim}"
                ))
            })?;
            let vector: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.check_row(&key, &vector)?;
            if store.rows.insert(key.clone(), vector).is_some() {
                return Err(Error::Corruption(format!("duplicate key `{key}`")));
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after {count} rows of dim {dim}",
                bytes.len() - cur.pos
            )));
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn slice(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corruption(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let s = self.slice(N)?;
        Ok(s.try_into().expect("slice of length N"))
    }
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingStore::from_bytes(&bytes)
}

pub fn write_embeddings(store: &EmbeddingStore, path: &Path) -> Result<()> {
    fs::write(path, store.to_bytes()).map_err(|e| Error::io(path, e))
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Cosine in f64; zero when either side has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Scales `v` to unit length; `None` for the zero vector.
pub fn unit_f32(v: &[f64]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| (x / norm) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entity(id: &str, title: &str) -> Entity {
        Entity {
            entity_id: id.into(),
            title: title.into(),
            description: String::new(),
            categories: vec!["Laptops".into()],
            attributes: BTreeMap::new(),
            image_ids: vec![],
        }
    }

    fn write_lines(dir: &tempfile::TempDir, name: &str, lines: &[String]) -> std::path::PathBuf {
        let path = dir.path().join(name);
        fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    #[test]
    fn load_kb_counts_and_injects_name() {
        let dir = tempfile::tempdir().unwrap();
        let lines: Vec<String> = ["e2", "e1", "e3"]
            .iter()
            .map(|id| serde_json::to_string(&entity(id, "Acme Laptop 15")).unwrap())
            .collect();
        let kb = load_kb(&write_lines(&dir, "kb.jsonl", &lines)).unwrap();
        assert_eq!(kb.len(), 3);
        let ids: Vec<_> = kb.entities().map(|e| e.entity_id.as_str()).collect();
        assert_eq!(ids, ["e1", "e2", "e3"]);
        for e in kb.entities() {
            assert_eq!(e.attributes[NAME_ATTRIBUTE], "Acme Laptop 15");
        }
        assert!(kb.attribute_vocabulary()["name"].contains("Acme Laptop 15"));
    }

    #[test]
    fn load_kb_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let line = serde_json::to_string(&entity("e1", "A")).unwrap();
        let err = load_kb(&write_lines(&dir, "kb.jsonl", &[line.clone(), line])).unwrap_err();
        assert!(matches!(err, Error::DuplicateEntity(ref id) if id == "e1"), "{err}");
    }

    #[test]
    fn load_kb_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let good = serde_json::to_string(&entity("e1", "A")).unwrap();
        let err = load_kb(&write_lines(&dir, "kb.jsonl", &[good, "{not json".into()])).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn load_reviews_token_ceiling() {
        let dir = tempfile::tempdir().unwrap();
        let mut lines = Vec::new();
        for i in 0..10 {
            let n = match i {
                0 => 501,
                1 => 600,
                2 => 500,
                _ => 5,
            };
            let review = Review {
                review_id: format!("r{i}"),
                text: vec!["word"; n].join(" "),
                mention: None,
                image_ids: vec![],
                gold_entity_id: None,
                extracted_attributes: BTreeMap::new(),
            };
            lines.push(serde_json::to_string(&review).unwrap());
        }
        let loaded = load_reviews(&write_lines(&dir, "r.jsonl", &lines), 500).unwrap();
        assert_eq!(loaded.reviews.len(), 8);
        assert_eq!(loaded.dropped(), 2);
        assert!(loaded.reviews.iter().any(|r| r.review_id == "r2"));

        let empty = load_reviews(&write_lines(&dir, "e.jsonl", &[]), 500).unwrap();
        assert!(empty.reviews.is_empty());
    }

    #[test]
    fn load_reviews_validates_mention_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let ok = r#"{"review_id":"r1","text":"héllo laptop","mention":{"surface":"laptop","start":6,"end":12},"image_ids":[],"gold_entity_id":null}"#;
        let bad = r#"{"review_id":"r2","text":"hello laptop","mention":{"surface":"laptop","start":0,"end":6},"image_ids":[],"gold_entity_id":null}"#;
        let loaded = load_reviews(&write_lines(&dir, "ok.jsonl", &[ok.into()]), 500).unwrap();
        assert_eq!(loaded.reviews[0].mention_surface(), Some("laptop"));
        let err = load_reviews(&write_lines(&dir, "bad.jsonl", &[ok.into(), bad.into()]), 500)
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn char_slice_handles_multibyte() {
        assert_eq!(char_slice("héllo", 1, 3), Some("él"));
        assert_eq!(char_slice("abc", 3, 3), Some(""));
        assert_eq!(char_slice("abc", 2, 4), None);
    }

    #[test]
    fn store_round_trip_small() {
        let mut store = EmbeddingStore::new(4, true).unwrap();
        store.insert("a", vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let back = EmbeddingStore::from_bytes(&store.to_bytes()).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.get("a").unwrap()[0].to_bits(), 1.0f32.to_bits());
    }

    #[test]
    fn store_rejects_bad_magic_and_truncation() {
        let err = EmbeddingStore::from_bytes(b"XXXX\0\0\0\0").unwrap_err();
        assert!(matches!(err, Error::Format(_)));

        let mut store = EmbeddingStore::new(3, false).unwrap();
        store.insert("k", vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = store.to_bytes();
        let err = EmbeddingStore::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(err, Error::Corruption(_)), "{err}");
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            EmbeddingStore::from_bytes(&long).unwrap_err(),
            Error::Corruption(_)
        ));
    }

    #[test]
    fn normalized_store_checks_norms() {
        let mut store = EmbeddingStore::new(2, true).unwrap();
        assert!(store.insert("x", vec![3.0, 4.0]).is_err());
        assert!(matches!(
            store.insert("y", vec![1.0]).unwrap_err(),
            Error::DimensionMismatch { expected: 2, got: 1 }
        ));
    }
}
