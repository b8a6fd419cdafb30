//! Candidate retrieval: exact cosine top-k, cross rescoring, image
//! similarity, weighted fusion, and prior-based filtering.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{cosine, EmbeddingStore, KnowledgeBase, Review};
use crate::encoders::{CrossPair, CrossScorer, ImageEmbedder, TextEmbedder};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::textnorm::{normalize_phrase, PriorIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub stage1_k: usize,
    pub final_k: usize,
    pub w_text: f64,
    pub w_cross: f64,
    pub w_image: f64,
    pub apply_prior_filter: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            stage1_k: 1000,
            final_k: 10,
            w_text: 1.0 / 3.0,
            w_cross: 1.0 / 3.0,
            w_image: 1.0 / 3.0,
            apply_prior_filter: true,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.w_text, self.w_cross, self.w_image];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "fusion weights must be non-negative with a positive sum, got {weights:?}"
            )));
        }
        if self.final_k == 0 || self.final_k > self.stage1_k {
            return Err(Error::InvalidArgument(format!(
                "need 1 ≤ final_k ≤ stage1_k, got final_k={} stage1_k={}",
                self.final_k, self.stage1_k
            )));
        }
        Ok(())
    }

    pub fn fuse(&self, text_cos: f64, cross_score: f64, image_cos: f64) -> f64 {
        self.w_text * text_cos + self.w_cross * cross_score + self.w_image * image_cos
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entity_id: String,
    pub text_cos: f64,
    pub cross_score: f64,
    pub image_cos: f64,
    pub fused_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub review_id: String,
    pub candidates: Vec<Candidate>,
    #[serde(default)]
    pub gold_in_set: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl CandidateSet {
    /// 1-based rank of `entity_id`, if present.
    pub fn rank_of(&self, entity_id: &str) -> Option<usize> {
        self.candidates
            .iter()
            .position(|c| c.entity_id == entity_id)
            .map(|p| p + 1)
    }

    pub fn contains(&self, entity_id: &str) -> bool {
        self.rank_of(entity_id).is_some()
    }
}

/// Descending score, then ascending key.
fn by_score_then_key(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Exact top-k by cosine; ties broken by ascending key.
pub fn top_k_cosine(query: &[f32], store: &EmbeddingStore, k: usize) -> Result<Vec<(String, f64)>> {
    if query.len() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            got: query.len(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut scored: Vec<(String, f64)> = store
        .iter()
        .map(|(key, v)| (key.to_string(), cosine(query, v)))
        .collect();
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_score_then_key);
        scored.truncate(k);
    }
    scored.sort_by(by_score_then_key);
    Ok(scored)
}

/// Embeds `title description` of every entity, keyed by entity id.
pub fn build_entity_text_store(kb: &KnowledgeBase, embedder: &dyn TextEmbedder) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::new(embedder.dim(), true)?;
    for entity in kb.entities() {
        store.insert(entity.entity_id.clone(), embedder.embed(&entity.retrieval_text()))?;
    }
    Ok(store)
}

/// Everything retrieval reads. All fields are shared, immutable inputs.
pub struct RetrievalContext<'a> {
    pub kb: &'a KnowledgeBase,
    /// Entity text embeddings keyed by entity id.
    pub entity_text: &'a EmbeddingStore,
    /// Precomputed query embeddings keyed by review id; reviews missing
    /// from it are embedded with `text_embedder`.
    pub query_text: Option<&'a EmbeddingStore>,
    pub text_embedder: &'a dyn TextEmbedder,
    pub images: Option<&'a dyn ImageEmbedder>,
    pub cross_scorer: &'a dyn CrossScorer,
    pub priors: &'a PriorIndex,
}

impl RetrievalContext<'_> {
    fn query_vector(&self, review: &Review) -> Vec<f32> {
        if let Some(v) = self.query_text.and_then(|s| s.get(&review.review_id)) {
            return v.to_vec();
        }
        self.text_embedder.embed(query_text(review))
    }

    fn image_cos(&self, review: &Review, entity_id: &str) -> Result<f64> {
        let Some(images) = self.images else {
            return Ok(0.0);
        };
        let entity_img = self
            .kb
            .get(entity_id)
            .and_then(|e| e.first_image())
            .and_then(|k| images.image(k));
        let review_img = review.first_image().and_then(|k| images.image(k));
        match (review_img, entity_img) {
            (Some(r), Some(e)) if r.len() != e.len() => Err(Error::DimensionMismatch {
                expected: r.len(),
                got: e.len(),
            }),
            (Some(r), Some(e)) => Ok(cosine(r, e)),
            _ => Ok(0.0),
        }
    }
}

/// Query text for stage one: the mention surface, or the review text when
/// no mention is known.
pub fn query_text(review: &Review) -> &str {
    review.mention_surface().unwrap_or(&review.text)
}

pub fn retrieve(review: &Review, ctx: &RetrievalContext<'_>, config: &RetrievalConfig) -> Result<CandidateSet> {
    config.validate()?;
    let query = ctx.query_vector(review);
    let stage1 = top_k_cosine(&query, ctx.entity_text, config.stage1_k)?;
    let mention = query_text(review);

    let mut candidates = Vec::with_capacity(stage1.len());
    for (entity_id, text_cos) in stage1 {
        let Some(entity) = ctx.kb.get(&entity_id) else {
            continue;
        };
        let cross_score = ctx.cross_scorer.cross_score(&CrossPair {
            review_id: &review.review_id,
            entity_id: &entity_id,
            mention,
            entity_text: &entity.description,
        });
        let image_cos = ctx.image_cos(review, &entity_id)?;
        let fused_score = config.fuse(text_cos, cross_score, image_cos);
        candidates.push(Candidate {
            entity_id,
            text_cos,
            cross_score,
            image_cos,
            fused_score,
        });
    }
    candidates.sort_by(|a, b| {
        b.fused_score
            .total_cmp(&a.fused_score)
            .then_with(|| a.entity_id.cmp(&b.entity_id))
    });
    candidates.truncate(config.final_k);

    let mut warnings = Vec::new();
    if config.apply_prior_filter {
        match review.mention_surface() {
            None => warnings.push("prior filter skipped: review has no mention".to_string()),
            Some(surface) => {
                let phrase = normalize_phrase(surface);
                if ctx.priors.contains_phrase(&phrase) {
                    candidates.retain(|c| {
                        let leaf = ctx.kb.get(&c.entity_id).map(|e| e.leaf_category()).unwrap_or("");
                        ctx.priors.entity_prob(&phrase, &c.entity_id) > 0.0
                            || ctx.priors.category_prob(&phrase, leaf) > 0.0
                    });
                } else {
                    warnings.push(format!("prior filter skipped: phrase `{phrase}` not in index"));
                }
            }
        }
    }

    let gold_in_set = review
        .gold_entity_id
        .as_deref()
        .map(|g| candidates.iter().any(|c| c.entity_id == g));
    Ok(CandidateSet {
        review_id: review.review_id.clone(),
        candidates,
        gold_in_set,
        warnings,
    })
}

/// Retrieves for every review in parallel; output follows input order.
pub fn retrieve_all(
    reviews: &[Review],
    ctx: &RetrievalContext<'_>,
    config: &RetrievalConfig,
) -> Result<Vec<CandidateSet>> {
    reviews.par_iter().map(|r| retrieve(r, ctx, config)).collect()
}

/// Fraction of candidate sets whose gold entity ranks within the top k.
pub fn recall_at_k(
    candidate_sets: &[CandidateSet],
    gold: &BTreeMap<String, String>,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let mut ranks = Vec::with_capacity(candidate_sets.len());
    for set in candidate_sets {
        let g = gold
            .get(&set.review_id)
            .ok_or_else(|| Error::UnknownReview(set.review_id.clone()))?;
        ranks.push(set.rank_of(g));
    }
    let n = ranks.len().max(1) as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| matches!(r, Some(r) if *r <= k)).count();
            (k, if ranks.is_empty() { 0.0 } else { hits as f64 / n })
        })
        .collect())
}

pub fn write_candidates(sets: &[CandidateSet], path: &Path) -> Result<()> {
    jsonl::write(path, sets)
}

pub fn read_candidates(path: &Path) -> Result<Vec<CandidateSet>> {
    jsonl::read(path)
}
