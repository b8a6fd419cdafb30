//! Glue between the stages: review annotation, feature rows for retrieved
//! candidates, training sets, and batch prediction.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::corpus::{EmbeddingStore, KnowledgeBase, Review};
use crate::disambig::{
    candidate_features, fuse_and_predict, image_score, AdapterParams, FusionConfig, NliHeadParams, Prediction,
    ScoredCandidate, FEATURE_DIM,
};
use crate::encoders::{PairEntailmentScorer, TextEmbedder};
use crate::error::{Error, Result};
use crate::mining::detect_mention;
use crate::optim::{ImagePair, NliInstance};
use crate::retrieval::CandidateSet;
use crate::textnorm::{AttributeMatcher, PriorIndex, Stopwords};

/// Shared read-only inputs for disambiguation.
pub struct LinkContext<'a> {
    pub kb: &'a KnowledgeBase,
    pub priors: &'a PriorIndex,
    pub stopwords: &'a Stopwords,
    pub entailment: &'a dyn PairEntailmentScorer,
    pub images: Option<&'a EmbeddingStore>,
}

/// Detects mentions for reviews that lack one, using their gold product.
/// Returns how many reviews still have no mention.
pub fn detect_mentions(
    reviews: &mut [Review],
    kb: &KnowledgeBase,
    embedder: &dyn TextEmbedder,
    stopwords: &Stopwords,
) -> usize {
    reviews.par_iter_mut().for_each(|r| {
        if r.mention.is_none() {
            if let Some(product) = r.gold_entity_id.as_deref().and_then(|g| kb.get(g)) {
                r.mention = detect_mention(r, product, embedder, stopwords);
            }
        }
    });
    reviews.iter().filter(|r| r.mention.is_none()).count()
}

/// Adds KB-vocabulary matches to each review's extracted attributes.
/// Pairs already present (from upstream extractors) are kept.
pub fn extract_all_attributes(reviews: &mut [Review], kb: &KnowledgeBase, stopwords: &Stopwords) {
    let matcher = AttributeMatcher::new(kb, stopwords);
    reviews.par_iter_mut().for_each(|r| {
        for (k, v) in matcher.extract(&r.text).pairs {
            r.extracted_attributes.entry(k).or_insert(v);
        }
    });
}

/// Feature rows for every candidate of `set`, in candidate order.
pub fn feature_rows(
    review: &Review,
    set: &CandidateSet,
    ctx: &LinkContext<'_>,
    use_attributes: bool,
) -> Vec<[f64; FEATURE_DIM]> {
    set.candidates
        .iter()
        .filter_map(|c| ctx.kb.get(&c.entity_id))
        .map(|e| {
            let f = candidate_features(review, e, ctx.entailment, ctx.priors);
            if use_attributes { f } else { f.without_attributes() }.to_array()
        })
        .collect()
}

fn index_sets(sets: &[CandidateSet]) -> HashMap<&str, &CandidateSet> {
    sets.iter().map(|s| (s.review_id.as_str(), s)).collect()
}

/// Training instances for the NLI head. Reviews whose gold entity was not
/// retrieved carry no usable label and are skipped.
pub fn nli_instances(
    reviews: &[Review],
    sets: &[CandidateSet],
    ctx: &LinkContext<'_>,
    use_attributes: bool,
) -> Vec<NliInstance> {
    let by_id = index_sets(sets);
    let built: Vec<Option<NliInstance>> = reviews
        .par_iter()
        .map(|r| {
            let gold = r.gold_entity_id.as_deref()?;
            let set = by_id.get(r.review_id.as_str())?;
            let set = CandidateSet {
                candidates: set
                    .candidates
                    .iter()
                    .filter(|c| ctx.kb.contains(&c.entity_id))
                    .cloned()
                    .collect(),
                ..(*set).clone()
            };
            let gold = set.rank_of(gold)? - 1;
            Some(NliInstance {
                features: feature_rows(r, &set, ctx, use_attributes),
                gold,
            })
        })
        .collect();
    built.into_iter().flatten().collect()
}

/// (review image, gold entity image) pairs for reviews where both exist.
pub fn image_pairs(reviews: &[Review], kb: &KnowledgeBase, images: &EmbeddingStore) -> Vec<ImagePair> {
    let widen = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>();
    reviews
        .iter()
        .filter_map(|r| {
            let review = images.get(r.first_image()?)?;
            let gold = kb.get(r.gold_entity_id.as_deref()?)?;
            let entity = images.get(gold.first_image()?)?;
            Some(ImagePair {
                review: widen(review),
                entity: widen(entity),
            })
        })
        .collect()
}

/// Trained disambiguation parameters.
#[derive(Debug, Clone, Copy)]
pub struct Model<'a> {
    pub head: &'a NliHeadParams,
    /// `None` scores raw image cosines.
    pub adapter: Option<&'a AdapterParams>,
}

pub fn predict_review(
    review: &Review,
    set: &CandidateSet,
    ctx: &LinkContext<'_>,
    model: Model<'_>,
    fusion: &FusionConfig,
    use_attributes: bool,
) -> Result<Prediction> {
    let review_img = ctx.images.zip(review.first_image()).and_then(|(s, k)| s.get(k));
    let mut scored = Vec::with_capacity(set.candidates.len());
    for c in &set.candidates {
        let Some(entity) = ctx.kb.get(&c.entity_id) else {
            continue;
        };
        let mut f = candidate_features(review, entity, ctx.entailment, ctx.priors);
        if !use_attributes {
            f = f.without_attributes();
        }
        let s_t = crate::disambig::nli_score(&f, model.head)?;
        let entity_img = ctx.images.zip(entity.first_image()).and_then(|(s, k)| s.get(k));
        let s_v = match (review_img, entity_img) {
            (Some(r), Some(e)) => Some(match model.adapter {
                Some(a) => image_score(r, e, a)?,
                None => crate::corpus::cosine(r, e),
            }),
            _ => None,
        };
        scored.push(ScoredCandidate {
            entity_id: c.entity_id.clone(),
            s_t,
            s_v,
        });
    }
    let extracted = if fusion.apply_attribute_filter {
        review.extracted_attributes.clone()
    } else {
        BTreeMap::new()
    };
    Ok(fuse_and_predict(&review.review_id, &scored, ctx.kb, fusion, &extracted, ctx.stopwords))
}

/// Predicts every review, in parallel; output is sorted by review id.
/// A review without a candidate set abstains.
pub fn predict_all(
    reviews: &[Review],
    sets: &[CandidateSet],
    ctx: &LinkContext<'_>,
    model: Model<'_>,
    fusion: &FusionConfig,
    use_attributes: bool,
) -> Result<Vec<Prediction>> {
    fusion.validate()?;
    let by_id = index_sets(sets);
    let mut out = reviews
        .par_iter()
        .map(|r| match by_id.get(r.review_id.as_str()) {
            Some(set) => predict_review(r, set, ctx, model, fusion, use_attributes),
            None => Ok(Prediction {
                review_id: r.review_id.clone(),
                prediction: None,
                scores: BTreeMap::new(),
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.review_id.cmp(&b.review_id));
    Ok(out)
}

/// review id → gold entity id for reviews that have a gold label.
pub fn gold_map(reviews: &[Review]) -> BTreeMap<String, String> {
    reviews
        .iter()
        .filter_map(|r| Some((r.review_id.clone(), r.gold_entity_id.clone()?)))
        .collect()
}

/// Keeps the candidate sets whose review is in `reviews`.
pub fn sets_for<'s>(reviews: &[Review], sets: &'s [CandidateSet]) -> Vec<&'s CandidateSet> {
    let wanted: std::collections::HashSet<&str> = reviews.iter().map(|r| r.review_id.as_str()).collect();
    sets.iter().filter(|s| wanted.contains(s.review_id.as_str())).collect()
}

pub fn write_predictions(predictions: &[Prediction], path: &std::path::Path) -> Result<()> {
    crate::jsonl::write(path, predictions)
}

pub fn read_predictions(path: &std::path::Path) -> Result<Vec<Prediction>> {
    let preds: Vec<Prediction> = crate::jsonl::read(path)?;
    let mut seen = std::collections::HashSet::new();
    for p in &preds {
        if !seen.insert(p.review_id.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "{}: duplicate prediction for review `{}`",
                path.display(),
                p.review_id
            )));
        }
    }
    Ok(preds)
}
