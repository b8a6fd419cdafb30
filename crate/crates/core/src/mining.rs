//! Dataset construction: mention detection, informativeness filtering and
//! hard-negative mining.

use std::collections::{BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{char_slice, cosine, EmbeddingStore, Entity, KnowledgeBase, MentionSpan, Review};
use crate::encoders::{ImageEmbedder, TextEmbedder};
use crate::error::{Error, Result};
use crate::retrieval::top_k_cosine;
use crate::textnorm::{content_tokens, match_key, normalize_token, noun_chunks, tokens, Stopwords, MAX_NGRAM};

/// Phrases that can name `product`: noun chunks of its title and of each
/// category.
pub fn product_name_candidates(product: &Entity, stopwords: &Stopwords) -> BTreeSet<String> {
    std::iter::once(&product.title)
        .chain(&product.categories)
        .flat_map(|text| noun_chunks(text, stopwords))
        .collect()
}

/// Finds the review span (at most six tokens, not crossing punctuation)
/// whose normalized form names the product and whose surface is most
/// similar to the product title. Ties go to the earliest, then shortest,
/// span.
pub fn detect_mention(
    review: &Review,
    product: &Entity,
    embedder: &dyn TextEmbedder,
    stopwords: &Stopwords,
) -> Option<MentionSpan> {
    let candidates = product_name_candidates(product, stopwords);
    let toks = tokens(&review.text);
    let norm: Vec<String> = toks.iter().map(|t| normalize_token(&t.text)).collect();
    let title = embedder.embed(&product.title);

    let mut best: Option<(f64, MentionSpan)> = None;
    for i in 0..toks.len() {
        let mut phrase = String::new();
        for n in 1..=MAX_NGRAM.min(toks.len() - i) {
            let j = i + n - 1;
            if n > 1 {
                if toks[j].punct_before {
                    break;
                }
                phrase.push(' ');
            }
            phrase.push_str(&norm[j]);
            if !candidates.contains(&phrase) {
                continue;
            }
            let (start, end) = (toks[i].start, toks[j].end);
            let Some(surface) = char_slice(&review.text, start, end) else {
                continue;
            };
            let score = cosine(&embedder.embed(surface), &title);
            // spans arrive by start then length, so only a strict gain wins
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((
                    score,
                    MentionSpan {
                        surface: surface.to_string(),
                        start,
                        end,
                    },
                ));
            }
        }
    }
    best.map(|(_, span)| span)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InformativenessFeatures {
    pub mentioned_attribute_count: usize,
    /// Maximum cosine over review/product image pairs, −1 when either side
    /// has no usable image.
    pub image_similarity: f64,
    pub description_similarity: f64,
    pub title_similarity: f64,
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

pub fn informativeness_features(
    review: &Review,
    product: &Entity,
    text_embedder: &dyn TextEmbedder,
    images: Option<&dyn ImageEmbedder>,
    stopwords: &Stopwords,
) -> InformativenessFeatures {
    let review_toks: Vec<String> = content_tokens(&review.text, stopwords)
        .into_iter()
        .map(|t| t.0)
        .collect();
    let mentioned_attribute_count = product
        .attributes
        .values()
        .filter(|v| {
            let key: Vec<String> = match_key(v, stopwords).split(' ').map(str::to_string).collect();
            contains_run(&review_toks, &key)
        })
        .count();

    let mut image_similarity = -1.0f64;
    if let Some(images) = images {
        for r in review.image_ids.iter().filter_map(|k| images.image(k)) {
            for e in product.image_ids.iter().filter_map(|k| images.image(k)) {
                if r.len() == e.len() {
                    image_similarity = image_similarity.max(cosine(r, e));
                }
            }
        }
    }

    let text = text_embedder.embed(&review.text);
    InformativenessFeatures {
        mentioned_attribute_count,
        image_similarity,
        description_similarity: cosine(&text, &text_embedder.embed(&product.description)),
        title_similarity: cosine(&text, &text_embedder.embed(&product.title)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Keep a review when any feature exceeds its threshold.
    #[default]
    AnyPass,
    /// Keep a review only when every feature exceeds its threshold.
    AllPass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterThresholds {
    pub min_attribute_count: usize,
    pub min_image_sim: f64,
    pub min_description_sim: f64,
    pub min_title_sim: f64,
    pub mode: FilterMode,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            min_attribute_count: 0,
            min_image_sim: 0.35,
            min_description_sim: 0.35,
            min_title_sim: 0.35,
            mode: FilterMode::AnyPass,
        }
    }
}

impl FilterThresholds {
    /// Every comparison is strict.
    pub fn passes(&self, f: &InformativenessFeatures) -> bool {
        let checks = [
            f.mentioned_attribute_count > self.min_attribute_count,
            f.image_similarity > self.min_image_sim,
            f.description_similarity > self.min_description_sim,
            f.title_similarity > self.min_title_sim,
        ];
        match self.mode {
            FilterMode::AnyPass => checks.iter().any(|&c| c),
            FilterMode::AllPass => checks.iter().all(|&c| c),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kept: Vec<Review>,
    pub dropped: Vec<(Review, InformativenessFeatures)>,
}

/// Partitions reviews by informativeness against their gold product.
/// Input order is preserved within both parts.
pub fn filter_reviews(
    reviews: Vec<Review>,
    kb: &KnowledgeBase,
    thresholds: &FilterThresholds,
    text_embedder: &dyn TextEmbedder,
    images: Option<&dyn ImageEmbedder>,
    stopwords: &Stopwords,
) -> Result<FilterOutcome> {
    let features = reviews
        .par_iter()
        .map(|r| {
            let product = r
                .gold_entity_id
                .as_deref()
                .and_then(|g| kb.get(g))
                .ok_or_else(|| Error::MissingGold(r.review_id.clone()))?;
            Ok(informativeness_features(r, product, text_embedder, images, stopwords))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = FilterOutcome::default();
    for (review, f) in reviews.into_iter().zip(features) {
        if thresholds.passes(&f) {
            out.kept.push(review);
        } else {
            out.dropped.push((review, f));
        }
    }
    Ok(out)
}

/// Entity title embeddings keyed by entity id.
pub fn build_title_store(kb: &KnowledgeBase, embedder: &dyn TextEmbedder) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::new(embedder.dim(), true)?;
    for e in kb.entities() {
        store.insert(e.entity_id.clone(), embedder.embed(&e.title))?;
    }
    Ok(store)
}

/// First-image embeddings keyed by entity id; entities without a known
/// image are left out.
pub fn build_entity_image_store(kb: &KnowledgeBase, images: &dyn ImageEmbedder) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::new(images.dim(), false)?;
    for e in kb.entities() {
        if let Some(v) = e.first_image().and_then(|k| images.image(k)) {
            store.insert(e.entity_id.clone(), v.to_vec())?;
        }
    }
    Ok(store)
}

/// Union of the top-k entities by title cosine and by image cosine to the
/// gold entity, text channel first, deduplicated, gold excluded.
pub fn mine_hard_negatives(
    gold: &Entity,
    k: usize,
    titles: &EmbeddingStore,
    entity_images: Option<&EmbeddingStore>,
) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::InvalidArgument("hard-negative K must be at least 1".into()));
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut take = |ranked: Vec<(String, f64)>| {
        ranked
            .into_iter()
            .filter(|(id, _)| *id != gold.entity_id)
            .take(k)
            .for_each(|(id, _)| {
                if seen.insert(id.clone()) {
                    out.push(id);
                }
            });
    };
    if let Some(q) = titles.get(&gold.entity_id) {
        take(top_k_cosine(q, titles, k + 1)?);
    }
    if let Some(store) = entity_images {
        if let Some(q) = store.get(&gold.entity_id) {
            take(top_k_cosine(q, store, k + 1)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::HashEmbedder;
    use std::collections::BTreeMap;

    fn entity(id: &str, title: &str, cats: &[&str], attrs: &[(&str, &str)]) -> Entity {
        Entity {
            entity_id: id.into(),
            title: title.into(),
            description: String::new(),
            categories: cats.iter().map(|c| c.to_string()).collect(),
            attributes: attrs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            image_ids: vec![],
        }
    }

    fn review(text: &str) -> Review {
        Review {
            review_id: "r".into(),
            text: text.into(),
            mention: None,
            image_ids: vec![],
            gold_entity_id: Some("p".into()),
            extracted_attributes: BTreeMap::new(),
        }
    }

    #[test]
    fn identical_surfaces_pick_earliest() {
        let p = entity("p", "Acme Laptop 15", &["Computers", "Laptops"], &[]);
        let m = detect_mention(
            &review("great laptop, this laptop rocks"),
            &p,
            &HashEmbedder::default(),
            &Stopwords::default(),
        )
        .unwrap();
        assert_eq!((m.surface.as_str(), m.start, m.end), ("laptop", 6, 12));
    }

    #[test]
    fn no_candidate_no_mention() {
        let p = entity("p", "Acme Laptop 15", &["Computers"], &[]);
        assert!(detect_mention(&review("arrived quickly"), &p, &HashEmbedder::default(), &Stopwords::default()).is_none());
    }

    #[test]
    fn spans_do_not_cross_punctuation() {
        let p = entity("p", "Gas Range", &["Ranges"], &[]);
        let m = detect_mention(&review("my gas. range works"), &p, &HashEmbedder::default(), &Stopwords::default()).unwrap();
        assert_eq!(m.surface, "range");
    }

    #[test]
    fn attribute_count_and_image_sentinel() {
        let p = entity("p", "Tote", &["Bags"], &[("Color", "light pink"), ("Strap", "black"), ("Size", "large")]);
        let f = informativeness_features(
            &review("the light pink one with a black strap"),
            &p,
            &HashEmbedder::default(),
            None,
            &Stopwords::default(),
        );
        assert_eq!(f.mentioned_attribute_count, 2);
        assert_eq!(f.image_similarity, -1.0);
    }

    fn feats(count: usize, img: f64, desc: f64, title: f64) -> InformativenessFeatures {
        InformativenessFeatures {
            mentioned_attribute_count: count,
            image_similarity: img,
            description_similarity: desc,
            title_similarity: title,
        }
    }

    #[test]
    fn threshold_modes() {
        let t = FilterThresholds {
            min_attribute_count: 0,
            min_image_sim: 0.1,
            min_description_sim: 0.1,
            min_title_sim: 0.1,
            mode: FilterMode::AnyPass,
        };
        assert!(!t.passes(&feats(0, 0.0, 0.0, 0.0)));
        assert!(t.passes(&feats(3, 0.0, 0.0, 0.0)));
        assert!(!t.passes(&feats(0, 0.1, 0.1, 0.1)));
        let all = FilterThresholds {
            mode: FilterMode::AllPass,
            ..t
        };
        assert!(!all.passes(&feats(3, 0.0, 0.0, 0.0)));
        assert!(all.passes(&feats(1, 0.2, 0.2, 0.2)));
    }

    #[test]
    fn missing_gold_names_review() {
        let kb = KnowledgeBase::from_entities(vec![entity("x", "X", &["C"], &[])]).unwrap();
        let err = filter_reviews(
            vec![review("text")],
            &kb,
            &FilterThresholds::default(),
            &HashEmbedder::default(),
            None,
            &Stopwords::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("`r`"));
    }
}
