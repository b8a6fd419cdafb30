//! Deterministic text utilities: tokenization, plural stripping, a
//! stopword-delimited noun-chunk heuristic, the phrase prior index, and
//! KB-vocabulary attribute extraction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{KnowledgeBase, Review};
use crate::error::{Error, Result};
use crate::jsonl;

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Longest attribute value (in content tokens) the matcher will look for.
pub const MAX_NGRAM: usize = 6;

/// A lowercased alphanumeric run with character offsets into the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
    /// Non-whitespace characters separate this token from the previous one.
    pub punct_before: bool,
}

pub fn tokens(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut current: Option<Token> = None;
    let mut saw_punct = false;
    for (pos, ch) in text.chars().enumerate() {
        if ch.is_alphanumeric() {
            let tok = current.get_or_insert_with(|| Token {
                text: String::new(),
                start: pos,
                end: pos,
                punct_before: std::mem::take(&mut saw_punct),
            });
            tok.text.extend(ch.to_lowercase());
            tok.end = pos + 1;
        } else {
            if let Some(tok) = current.take() {
                out.push(tok);
            }
            if !ch.is_whitespace() {
                saw_punct = true;
            }
        }
    }
    out.extend(current);
    out
}

/// Lowercased maximal alphanumeric runs, in order.
pub fn tokenize(text: &str) -> Vec<String> {
    tokens(text).into_iter().map(|t| t.text).collect()
}

/// Plural stripping. `-ies` becomes `-y`; `-es` is dropped after sibilant
/// endings (`ss`, `x`, `z`, `ch`, `sh`); otherwise a final `s` is dropped
/// unless the word ends in `ss`, `us` or `is`. Every rule requires a stem of
/// at least three characters, and the result never triggers another rule.
pub fn normalize_token(token: &str) -> String {
    let chars: Vec<char> = token.chars().collect();
    let n = chars.len();
    let ends = |suffix: &str| token.ends_with(suffix);
    if ends("ies") && n - 3 >= 3 {
        let mut s: String = chars[..n - 3].iter().collect();
        s.push('y');
        return s;
    }
    if ends("es") && n - 2 >= 3 {
        let stem = &chars[..n - 2];
        let sibilant = stem.ends_with(&['s', 's'])
            || stem.ends_with(&['x'])
            || stem.ends_with(&['z'])
            || stem.ends_with(&['c', 'h'])
            || stem.ends_with(&['s', 'h']);
        if sibilant {
            return stem.iter().collect();
        }
    }
    if ends("s") && !ends("ss") && !ends("us") && !ends("is") && n > 3 {
        return chars[..n - 1].iter().collect();
    }
    token.to_string()
}

/// Normalized tokens of `text` joined by single spaces.
pub fn normalize_phrase(text: &str) -> String {
    tokens(text)
        .iter()
        .map(|t| normalize_token(&t.text))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stopwords(HashSet<String>);

impl Default for Stopwords {
    fn default() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }
}

impl Stopwords {
    /// One word per line; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Self {
        Stopwords(
            text.lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .collect(),
        )
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn empty() -> Self {
        Stopwords(HashSet::new())
    }

    /// True if the token or its normalized form is a stopword.
    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token) || self.0.contains(&normalize_token(token))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A token containing a digit ("15", "1tb", "x200") is a modifier and never
/// the head of a chunk.
fn can_head(token: &str) -> bool {
    !token.chars().any(|c| c.is_ascii_digit())
}

/// Noun-chunk heuristic. The token stream is split at stopwords and
/// punctuation; in each content run the head is the last digit-free token,
/// and every suffix of the run ending at the head is emitted. Output is
/// normalized, deduplicated, and in first-seen order.
pub fn noun_chunks(text: &str, stopwords: &Stopwords) -> Vec<String> {
    let mut runs: Vec<Vec<String>> = Vec::new();
    let mut run: Vec<String> = Vec::new();
    for tok in tokens(text) {
        if tok.punct_before && !run.is_empty() {
            runs.push(std::mem::take(&mut run));
        }
        if stopwords.contains(&tok.text) {
            if !run.is_empty() {
                runs.push(std::mem::take(&mut run));
            }
            continue;
        }
        run.push(normalize_token(&tok.text));
    }
    if !run.is_empty() {
        runs.push(run);
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for run in runs {
        let Some(head) = run.iter().rposition(|t| can_head(t)) else {
            continue;
        };
        for start in 0..=head {
            let phrase = run[start..=head].join(" ");
            if seen.insert(phrase.clone()) {
                out.push(phrase);
            }
        }
    }
    out
}

/// Normalized tokens with stopwords removed, each with its character span.
pub fn content_tokens(text: &str, stopwords: &Stopwords) -> Vec<(String, usize, usize)> {
    tokens(text)
        .into_iter()
        .filter(|t| !stopwords.contains(&t.text))
        .map(|t| (normalize_token(&t.text), t.start, t.end))
        .collect()
}

/// Content-token form used to compare attribute values with review text.
pub fn match_key(text: &str, stopwords: &Stopwords) -> String {
    content_tokens(text, stopwords)
        .into_iter()
        .map(|(t, _, _)| t)
        .collect::<Vec<_>>()
        .join(" ")
}

// ---------------------------------------------------------------------------
// Prior index
// ---------------------------------------------------------------------------

/// Phrase → entity and phrase → leaf-category distributions estimated from
/// noun chunks of entity titles and categories.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PriorIndex {
    entity_prior: BTreeMap<String, BTreeMap<String, f64>>,
    category_prior: BTreeMap<String, BTreeMap<String, f64>>,
    phrase_counts: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PriorRecord {
    phrase: String,
    entities: BTreeMap<String, f64>,
    categories: BTreeMap<String, f64>,
    #[serde(default)]
    count: u64,
}

/// Builds the prior index. A phrase produced by several fields of the same
/// entity (title and a category, say) counts once per field.
pub fn build_prior_index(kb: &KnowledgeBase, stopwords: &Stopwords) -> PriorIndex {
    let mut entity_counts: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    let mut category_counts: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for entity in kb.entities() {
        let leaf = entity.leaf_category();
        let fields = std::iter::once(&entity.title).chain(entity.categories.iter());
        for field in fields {
            for phrase in noun_chunks(field, stopwords) {
                *entity_counts
                    .entry(phrase.clone())
                    .or_default()
                    .entry(entity.entity_id.clone())
                    .or_default() += 1;
                *category_counts
                    .entry(phrase)
                    .or_default()
                    .entry(leaf.to_string())
                    .or_default() += 1;
            }
        }
    }

    let normalize = |counts: BTreeMap<String, BTreeMap<String, u64>>| {
        counts
            .into_iter()
            .map(|(phrase, dist)| {
                let total: u64 = dist.values().sum();
                let probs = dist
                    .into_iter()
                    .map(|(k, c)| (k, c as f64 / total as f64))
                    .collect();
                (phrase, probs)
            })
            .collect::<BTreeMap<_, _>>()
    };
    let phrase_counts = entity_counts
        .iter()
        .map(|(p, d)| (p.clone(), d.values().sum()))
        .collect();
    PriorIndex {
        entity_prior: normalize(entity_counts),
        category_prior: normalize(category_counts),
        phrase_counts,
    }
}

impl PriorIndex {
    pub fn contains_phrase(&self, phrase: &str) -> bool {
        self.entity_prior.contains_key(phrase)
    }

    /// P̂(e|m); zero when the phrase or entity is absent.
    pub fn entity_prob(&self, phrase: &str, entity_id: &str) -> f64 {
        self.entity_prior
            .get(phrase)
            .and_then(|d| d.get(entity_id))
            .copied()
            .unwrap_or(0.0)
    }

    /// P̂(c|m); zero when the phrase or category is absent.
    pub fn category_prob(&self, phrase: &str, category: &str) -> f64 {
        self.category_prior
            .get(phrase)
            .and_then(|d| d.get(category))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn entity_distribution(&self, phrase: &str) -> Option<&BTreeMap<String, f64>> {
        self.entity_prior.get(phrase)
    }

    pub fn category_distribution(&self, phrase: &str) -> Option<&BTreeMap<String, f64>> {
        self.category_prior.get(phrase)
    }

    pub fn phrase_count(&self, phrase: &str) -> u64 {
        self.phrase_counts.get(phrase).copied().unwrap_or(0)
    }

    pub fn phrases(&self) -> impl Iterator<Item = &str> + '_ {
        self.entity_prior.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entity_prior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entity_prior.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let records: Vec<PriorRecord> = self
            .entity_prior
            .iter()
            .map(|(phrase, entities)| PriorRecord {
                phrase: phrase.clone(),
                entities: entities.clone(),
                categories: self.category_prior.get(phrase).cloned().unwrap_or_default(),
                count: self.phrase_count(phrase),
            })
            .collect();
        jsonl::write(path, &records)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut index = PriorIndex::default();
        for r in jsonl::read::<PriorRecord>(path)? {
            index.phrase_counts.insert(r.phrase.clone(), r.count);
            index.category_prior.insert(r.phrase.clone(), r.categories);
            index.entity_prior.insert(r.phrase, r.entities);
        }
        Ok(index)
    }
}

// ---------------------------------------------------------------------------
// Attribute extraction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractedAttributes {
    pub pairs: BTreeMap<String, String>,
    /// Character span of the match in the review text.
    pub provenance: BTreeMap<String, (usize, usize)>,
}

/// Exact-match lookup from normalized value phrases to KB attribute values.
#[derive(Debug, Clone)]
pub struct AttributeMatcher {
    stopwords: Stopwords,
    by_phrase: HashMap<String, Vec<(String, String)>>,
    longest: usize,
}

impl AttributeMatcher {
    pub fn new(kb: &KnowledgeBase, stopwords: &Stopwords) -> Self {
        let mut by_phrase: HashMap<String, Vec<(String, String)>> = HashMap::new();
        let mut longest = 0;
        for (key, values) in kb.attribute_vocabulary() {
            for value in values {
                let toks = content_tokens(value, stopwords);
                if toks.is_empty() || toks.len() > MAX_NGRAM {
                    continue;
                }
                longest = longest.max(toks.len());
                let phrase = toks.into_iter().map(|t| t.0).collect::<Vec<_>>().join(" ");
                by_phrase
                    .entry(phrase)
                    .or_default()
                    .push((key.clone(), value.clone()));
            }
        }
        for entries in by_phrase.values_mut() {
            entries.sort();
        }
        Self {
            stopwords: stopwords.clone(),
            by_phrase,
            longest,
        }
    }

    /// Greedy longest match over the review's content tokens (stopwords
    /// skipped, n ≤ 6). The first value found for a key is kept.
    pub fn extract(&self, text: &str) -> ExtractedAttributes {
        let toks = content_tokens(text, &self.stopwords);
        let mut out = ExtractedAttributes::default();
        let mut i = 0;
        while i < toks.len() {
            let max_n = self.longest.min(toks.len() - i);
            let mut advanced = false;
            for n in (1..=max_n).rev() {
                let phrase = toks[i..i + n]
                    .iter()
                    .map(|t| t.0.as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                if let Some(entries) = self.by_phrase.get(&phrase) {
                    let span = (toks[i].1, toks[i + n - 1].2);
                    for (key, value) in entries {
                        if !out.pairs.contains_key(key) {
                            out.pairs.insert(key.clone(), value.clone());
                            out.provenance.insert(key.clone(), span);
                        }
                    }
                    i += n;
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                i += 1;
            }
        }
        out
    }
}

/// Matches review text against the KB attribute vocabulary.
pub fn extract_attributes(
    review: &Review,
    kb: &KnowledgeBase,
    stopwords: &Stopwords,
) -> ExtractedAttributes {
    AttributeMatcher::new(kb, stopwords).extract(&review.text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Entity;

    fn entity(id: &str, title: &str, cats: &[&str], attrs: &[(&str, &str)]) -> Entity {
        Entity {
            entity_id: id.into(),
            title: title.into(),
            description: String::new(),
            categories: cats.iter().map(|s| s.to_string()).collect(),
            attributes: attrs
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            image_ids: vec![],
        }
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("ASUS ROG Laptop - 1TB SSD"),
            ["asus", "rog", "laptop", "1tb", "ssd"]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("16GB memory!"), ["16gb", "memory"]);
    }

    #[test]
    fn token_offsets_are_characters() {
        let toks = tokens("né, laptop");
        assert_eq!((toks[1].start, toks[1].end), (4, 10));
        assert!(toks[1].punct_before);
        assert!(!toks[0].punct_before);
    }

    #[test]
    fn normalize_token_examples() {
        assert_eq!(normalize_token("laptops"), "laptop");
        assert_eq!(normalize_token("batteries"), "battery");
        assert_eq!(normalize_token("ssd"), "ssd");
        assert_eq!(normalize_token("ranges"), "range");
        assert_eq!(normalize_token("glasses"), "glass");
        assert_eq!(normalize_token("boxes"), "box");
        assert_eq!(normalize_token("this"), "this");
        assert_eq!(normalize_token("gas"), "gas");
    }

    #[test]
    fn noun_chunk_examples() {
        let stop = Stopwords::default();
        assert_eq!(
            noun_chunks("ASUS ROG Laptop", &stop),
            ["asus rog laptop", "rog laptop", "laptop"]
        );
        assert_eq!(noun_chunks("All Refrigerators", &stop), ["refrigerator"]);
        assert_eq!(noun_chunks("Gas Ranges", &stop), ["gas range", "range"]);
        assert_eq!(
            noun_chunks("Acme Laptop 15", &stop),
            ["acme laptop", "laptop"]
        );
        assert_eq!(
            noun_chunks("ASUS ROG Laptop - 1TB SSD", &stop),
            ["asus rog laptop", "rog laptop", "laptop", "1tb ssd", "ssd"]
        );
    }

    #[test]
    fn prior_index_hand_count() {
        let kb = KnowledgeBase::from_entities(vec![
            entity("A", "Acme Laptop 15", &["Notebooks"], &[]),
            entity("B", "Acme Laptop 17", &["Workstations"], &[]),
            entity("C", "Acme Phone", &["Handsets"], &[]),
        ])
        .unwrap();
        let index = build_prior_index(&kb, &Stopwords::default());
        let laptop = index.entity_distribution("laptop").unwrap();
        assert_eq!(laptop.len(), 2);
        assert_eq!(laptop["A"], 0.5);
        assert_eq!(laptop["B"], 0.5);
        assert_eq!(index.entity_distribution("phone").unwrap()["C"], 1.0);
        assert_eq!(index.category_prob("laptop", "Notebooks"), 0.5);
        assert!(!index.contains_phrase("refrigerator"));
        assert_eq!(index.phrase_count("acme laptop"), 2);
    }

    #[test]
    fn prior_index_counts_each_field() {
        let kb = KnowledgeBase::from_entities(vec![
            entity("A", "Gas Range", &["Ranges"], &[]),
            entity("B", "Electric Stove", &["Ranges"], &[]),
        ])
        .unwrap();
        let index = build_prior_index(&kb, &Stopwords::default());
        let range = index.entity_distribution("range").unwrap();
        assert!((range["A"] - 2.0 / 3.0).abs() < 1e-15);
        assert!((range["B"] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_entity_priors_are_one() {
        let kb = KnowledgeBase::from_entities(vec![entity(
            "only",
            "Premium Gas Ranges 30in",
            &["Appliances", "Ranges"],
            &[],
        )])
        .unwrap();
        let index = build_prior_index(&kb, &Stopwords::default());
        assert!(!index.is_empty());
        for phrase in index.phrases() {
            assert_eq!(index.entity_prob(phrase, "only"), 1.0);
            assert_eq!(index.category_prob(phrase, "Ranges"), 1.0);
        }
    }

    #[test]
    fn prior_index_round_trips_through_jsonl() {
        let kb = KnowledgeBase::from_entities(vec![
            entity("A", "Acme Laptop 15", &["Notebooks"], &[]),
            entity("B", "Acme Laptop 17", &["Workstations"], &[]),
        ])
        .unwrap();
        let index = build_prior_index(&kb, &Stopwords::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("priors.jsonl");
        index.write(&path).unwrap();
        assert_eq!(PriorIndex::read(&path).unwrap(), index);
    }

    fn review(text: &str) -> Review {
        Review {
            review_id: "r".into(),
            text: text.into(),
            mention: None,
            image_ids: vec![],
            gold_entity_id: None,
            extracted_attributes: BTreeMap::new(),
        }
    }

    #[test]
    fn extract_exact_match() {
        let kb = KnowledgeBase::from_entities(vec![
            entity("a", "X", &["c"], &[("System Memory", "16gb")]),
            entity("b", "X", &["c"], &[("System Memory", "32gb")]),
        ])
        .unwrap();
        let stop = Stopwords::default();
        let got = extract_attributes(&review("love the 16gb memory"), &kb, &stop);
        assert_eq!(got.pairs.len(), 1);
        assert_eq!(got.pairs["System Memory"], "16gb");
        assert_eq!(got.provenance["System Memory"], (9, 13));

        assert!(extract_attributes(&review("arrived quickly"), &kb, &stop)
            .pairs
            .is_empty());
    }

    #[test]
    fn extract_prefers_longest_match() {
        let kb = KnowledgeBase::from_entities(vec![
            entity("a", "Tote", &["Bags"], &[("Color", "pink")]),
            entity("b", "Tote", &["Bags"], &[("Color", "gray")]),
            entity("c", "Tote", &["Bags"], &[("Color", "gray pink")]),
        ])
        .unwrap();
        let got = extract_attributes(&review("gray and pink bag"), &kb, &Stopwords::default());
        assert_eq!(got.pairs["Color"], "gray pink");
        assert_eq!(got.provenance["Color"], (0, 13));
    }

    #[test]
    fn extract_keeps_first_value_per_key() {
        let kb = KnowledgeBase::from_entities(vec![
            entity("a", "Tote", &["Bags"], &[("Color", "pink")]),
            entity("b", "Tote", &["Bags"], &[("Color", "black")]),
        ])
        .unwrap();
        let got = extract_attributes(
            &review("black strap, pink body"),
            &kb,
            &Stopwords::default(),
        );
        assert_eq!(got.pairs["Color"], "black");
    }
}
