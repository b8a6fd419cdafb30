//! Metrics, seeded splits, grid search, the synthetic corpus generator and
//! the ablation runner.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::LazyLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_embeddings, write_kb, write_reviews, EmbeddingStore, Entity, KnowledgeBase, Review, NAME_ATTRIBUTE};
use crate::disambig::{AdapterParams, FusionConfig, NliHeadParams, Prediction, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::optim::{train_nli_head, ImagePair, LossReport, NliInstance, TrainConfig};
use crate::encoders::{LexicalCrossScorer, PairEntailmentScorer, TextEmbedder};
use crate::pipeline::{detect_mentions, extract_all_attributes, gold_map, nli_instances, predict_all, LinkContext, Model};
use crate::retrieval::{build_entity_text_store, retrieve_all, CandidateSet, RetrievalConfig, RetrievalContext};
use crate::textnorm::{build_prior_index, PriorIndex, Stopwords};

// ---------------------------------------------------------------------------
// Micro-F1
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Every gold-labelled review.
    EndToEnd,
    /// Only reviews whose gold entity was retrieved.
    Disambiguation,
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "end_to_end" | "end-to-end" => Ok(Setting::EndToEnd),
            "disambiguation" => Ok(Setting::Disambiguation),
            other => Err(Error::InvalidArgument(format!("unknown setting `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroF1Report {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_predicted: usize,
    pub n_abstained: usize,
    pub n_total: usize,
    pub setting: Setting,
}

/// Micro-averaged F1. Precision is over non-abstained predictions, recall
/// over every evaluated review; a review with no prediction abstains.
pub fn micro_f1(
    predictions: &BTreeMap<String, Option<String>>,
    gold: &BTreeMap<String, String>,
    setting: Setting,
    candidate_sets: Option<&[CandidateSet]>,
) -> Result<MicroF1Report> {
    if let Some(id) = predictions.keys().find(|id| !gold.contains_key(*id)) {
        return Err(Error::UnknownReview(id.clone()));
    }
    let retrieved: Option<HashMap<&str, &CandidateSet>> = match setting {
        Setting::EndToEnd => None,
        Setting::Disambiguation => {
            let sets = candidate_sets.ok_or_else(|| {
                Error::InvalidArgument("the disambiguation setting needs candidate sets".into())
            })?;
            Some(sets.iter().map(|s| (s.review_id.as_str(), s)).collect())
        }
    };

    let (mut total, mut predicted, mut correct) = (0usize, 0usize, 0usize);
    for (review_id, gold_id) in gold {
        if let Some(sets) = &retrieved {
            if !sets.get(review_id.as_str()).is_some_and(|s| s.contains(gold_id)) {
                continue;
            }
        }
        total += 1;
        if let Some(Some(p)) = predictions.get(review_id) {
            predicted += 1;
            correct += usize::from(p == gold_id);
        }
    }
    let precision = if predicted > 0 { correct as f64 / predicted as f64 } else { 0.0 };
    let recall = if total > 0 { correct as f64 / total as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MicroF1Report {
        precision,
        recall,
        f1,
        n_predicted: predicted,
        n_abstained: total - predicted,
        n_total: total,
        setting,
    })
}

pub fn prediction_map(predictions: &[Prediction]) -> BTreeMap<String, Option<String>> {
    predictions
        .iter()
        .map(|p| (p.review_id.clone(), p.prediction.clone()))
        .collect()
}

/// Uniformly random choice among each set's candidates.
pub fn random_predictions(sets: &[CandidateSet], seed: u64) -> BTreeMap<String, Option<String>> {
    let mut sorted: Vec<&CandidateSet> = sets.iter().collect();
    sorted.sort_by(|a, b| a.review_id.cmp(&b.review_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted
        .into_iter()
        .map(|s| {
            let pick = s.candidates.choose(&mut rng).map(|c| c.entity_id.clone());
            (s.review_id.clone(), pick)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Review>,
    pub dev: Vec<Review>,
    pub test: Vec<Review>,
}

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.75, 0.10, 0.15);

/// Seeded shuffle of the reviews (taken in review-id order) followed by a
/// contiguous partition. Part sizes are `round(ratio·n)` for train and dev;
/// test takes the rest.
pub fn split(mut reviews: Vec<Review>, ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be in [0, 1] and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    reviews.sort_by(|x, y| x.review_id.cmp(&y.review_id));
    reviews.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = reviews.len();
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_dev = ((b * n as f64).round() as usize).min(n - n_train);
    let test = reviews.split_off(n_train + n_dev);
    let dev = reviews.split_off(n_train);
    Ok(Split {
        train: reviews,
        dev,
        test,
    })
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

pub type GridPoint = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: GridPoint,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: GridPoint,
    pub best_score: f64,
    pub table: Vec<GridRow>,
}

/// Cartesian product of the grid, in key order then value order.
pub fn grid_points(grid: &BTreeMap<String, Vec<f64>>) -> Vec<GridPoint> {
    let mut points = vec![GridPoint::new()];
    for (name, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.insert(name.clone(), *v);
                    q
                })
            })
            .collect();
    }
    points
}

fn lexicographic(a: &GridPoint, b: &GridPoint) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|((ka, va), (kb, vb))| ka.cmp(kb).then(va.total_cmp(vb)))
        .find(|o| o.is_ne())
        .unwrap_or(a.len().cmp(&b.len()))
}

/// Evaluates every grid point (in parallel) and returns the highest score,
/// ties broken by the lexicographically smallest point.
pub fn grid_search<F>(grid: &BTreeMap<String, Vec<f64>>, evaluate: F) -> Result<GridResult>
where
    F: Fn(&GridPoint) -> Result<f64> + Sync,
{
    if grid.is_empty() || grid.values().any(Vec::is_empty) {
        return Err(Error::Empty("parameter grid"));
    }
    if grid.values().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameter grid"));
    }
    let points = grid_points(grid);
    let scores = points.par_iter().map(&evaluate).collect::<Result<Vec<f64>>>()?;
    let table: Vec<GridRow> = points
        .into_iter()
        .zip(scores)
        .map(|(point, score)| GridRow { point, score })
        .collect();
    let best = table
        .iter()
        .min_by(|a, b| b.score.total_cmp(&a.score).then_with(|| lexicographic(&a.point, &b.point)))
        .expect("grid is non-empty");
    Ok(GridResult {
        best: best.point.clone(),
        best_score: best.score,
        table,
    })
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct Schema {
    brands: Vec<String>,
    attributes: BTreeMap<String, Vec<String>>,
    categories: Vec<CategorySchema>,
    description_templates: Vec<String>,
    review_openers: Vec<String>,
    review_attribute_sentences: Vec<String>,
    review_closers: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct CategorySchema {
    path: Vec<String>,
    nouns: Vec<String>,
    keys: Vec<String>,
}

static SCHEMA: LazyLock<Schema> = LazyLock::new(|| {
    serde_json::from_str(include_str!("../data/synth_schema.json")).expect("bundled synth schema parses")
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_categories: usize,
    pub entities_per_category: usize,
    pub sibling_group_size: usize,
    pub attributes_per_entity: usize,
    pub n_reviews: usize,
    pub review_attribute_mentions: usize,
    pub image_noise_sigma: f64,
    /// Spread of sibling images around their group's shared image.
    pub sibling_image_spread: f64,
    pub image_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_categories: 5,
            entities_per_category: 80,
            sibling_group_size: 4,
            attributes_per_entity: 4,
            n_reviews: 2000,
            review_attribute_mentions: 2,
            image_noise_sigma: 0.2,
            sibling_image_spread: 0.02,
            image_dim: 64,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let schema = &*SCHEMA;
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n_categories == 0 || self.n_categories > schema.categories.len() {
            return fail(format!("n_categories must be in 1..={}", schema.categories.len()));
        }
        if self.sibling_group_size < 2 {
            return fail("sibling_group_size must be at least 2".into());
        }
        if self.entities_per_category == 0 || !self.entities_per_category.is_multiple_of(self.sibling_group_size) {
            return fail("entities_per_category must be a positive multiple of sibling_group_size".into());
        }
        let max_keys = schema.categories.iter().map(|c| c.keys.len()).min().unwrap_or(0);
        if self.attributes_per_entity == 0 || self.attributes_per_entity > max_keys {
            return fail(format!("attributes_per_entity must be in 1..={max_keys}"));
        }
        if self.review_attribute_mentions > self.attributes_per_entity {
            return fail("review_attribute_mentions cannot exceed attributes_per_entity".into());
        }
        let groups = self.entities_per_category / self.sibling_group_size;
        if groups > schema.brands.len() * 5 {
            return fail(format!("at most {} sibling groups per category", schema.brands.len() * 5));
        }
        if !(self.image_noise_sigma >= 0.0 && self.sibling_image_spread >= 0.0) {
            return fail("image noise and spread must be non-negative".into());
        }
        if self.image_dim == 0 {
            return fail("image_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub kb: KnowledgeBase,
    pub reviews: Vec<Review>,
    pub images: EmbeddingStore,
    pub gold: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GoldRecord {
    review_id: String,
    entity_id: String,
}

impl SynthCorpus {
    /// Writes `entities.jsonl`, `reviews.jsonl`, `images.amev` and
    /// `gold.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_kb(&self.kb, &dir.join("entities.jsonl"))?;
        write_reviews(&self.reviews, &dir.join("reviews.jsonl"))?;
        write_embeddings(&self.images, &dir.join("images.amev"))?;
        let gold: Vec<GoldRecord> = self
            .gold
            .iter()
            .map(|(r, e)| GoldRecord {
                review_id: r.clone(),
                entity_id: e.clone(),
            })
            .collect();
        jsonl::write(&dir.join("gold.jsonl"), &gold)
    }
}

pub fn read_gold(path: &Path) -> Result<BTreeMap<String, String>> {
    let records: Vec<GoldRecord> = jsonl::read(path)?;
    Ok(records.into_iter().map(|g| (g.review_id, g.entity_id)).collect())
}

fn gaussian_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `normalize(base + scale·noise)` with `noise` a standard Gaussian whose
/// per-coordinate deviation is `1/√d`, so its expected norm is about 1.
fn perturb(rng: &mut ChaCha8Rng, base: &[f64], scale: f64) -> Vec<f32> {
    let sd = scale / (base.len() as f64).sqrt();
    let v: Vec<f64> = base
        .iter()
        .map(|b| b + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    crate::corpus::unit_f32(&v).unwrap_or_else(|| crate::corpus::unit_f32(base).expect("unit base"))
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    slots
        .iter()
        .fold(template.to_string(), |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
}

/// Builds a planted corpus: categories of sibling groups that share a title
/// and description and differ in one or two attribute values, reviews
/// templated from their gold entity, and noisy review images.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let schema = &*SCHEMA;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let groups_per_category = config.entities_per_category / config.sibling_group_size;

    let mut entities = Vec::new();
    let mut images = EmbeddingStore::new(config.image_dim, true)?;
    let mut entity_counter = 0usize;
    let mut group_counter = 0usize;
    for cat in schema.categories.iter().take(config.n_categories) {
        let mut stems: Vec<(&String, &String)> = schema
            .brands
            .iter()
            .flat_map(|b| cat.nouns.iter().map(move |n| (b, n)))
            .collect();
        stems.shuffle(&mut rng);
        for &(brand, noun) in stems.iter().take(groups_per_category) {
            group_counter += 1;
            let model = 100 + group_counter;
            let title = format!("{brand} {} {model}", capitalize(noun));
            let template = schema.description_templates.choose(&mut rng).expect("templates");
            let description = fill(template, &[("noun", noun), ("brand", brand)]);

            let mut keys: Vec<&String> = cat.keys.iter().collect();
            keys.shuffle(&mut rng);
            keys.truncate(config.attributes_per_entity);
            keys.sort();
            let base: Vec<String> = keys
                .iter()
                .map(|k| schema.attributes[*k].choose(&mut rng).expect("values").clone())
                .collect();

            let mut tuples: Vec<Vec<String>> = Vec::new();
            let mut attempts = 0;
            while tuples.len() < config.sibling_group_size {
                attempts += 1;
                let mut t = base.clone();
                if !tuples.is_empty() || attempts > 1 {
                    let n_diff = rng.random_range(1..=2usize.min(keys.len()));
                    for i in rand::seq::index::sample(&mut rng, keys.len(), n_diff) {
                        let pool = &schema.attributes[keys[i]];
                        let others: Vec<&String> = pool.iter().filter(|v| **v != base[i]).collect();
                        t[i] = (*others.choose(&mut rng).expect("pool has alternatives")).clone();
                    }
                }
                if !tuples.contains(&t) {
                    tuples.push(t);
                }
                if attempts > 1000 {
                    return Err(Error::InvalidArgument(
                        "cannot build distinct sibling attribute tuples; reduce sibling_group_size".into(),
                    ));
                }
            }

            let group_image = gaussian_unit(&mut rng, config.image_dim);
            for tuple in tuples {
                entity_counter += 1;
                let entity_id = format!("e{entity_counter:05}");
                let image_id = format!("img/{entity_id}");
                let image = perturb(&mut rng, &group_image, config.sibling_image_spread);
                images.insert(image_id.clone(), image)?;
                let mut attributes: BTreeMap<String, String> =
                    keys.iter().map(|k| k.to_string()).zip(tuple).collect();
                attributes.insert(NAME_ATTRIBUTE.to_string(), title.clone());
                entities.push(Entity {
                    entity_id,
                    title: title.clone(),
                    description: description.clone(),
                    categories: cat.path.clone(),
                    attributes,
                    image_ids: vec![image_id],
                });
            }
        }
    }

    let kb = KnowledgeBase::from_entities(entities)?;
    let all: Vec<&Entity> = kb.entities().collect();
    let width = config.n_reviews.max(1).to_string().len();
    let mut reviews = Vec::with_capacity(config.n_reviews);
    let mut gold = BTreeMap::new();
    for i in 1..=config.n_reviews {
        let review_id = format!("r{i:0width$}");
        let entity = *all.choose(&mut rng).expect("non-empty kb");
        let (brand, noun) = {
            let mut words = entity.title.split(' ');
            (words.next().unwrap_or(""), words.next().unwrap_or("").to_lowercase())
        };
        let mention = if rng.random_bool(0.5) {
            noun.clone()
        } else {
            format!("{brand} {noun}")
        };
        let mut parts = vec![fill(
            schema.review_openers.choose(&mut rng).expect("openers"),
            &[("mention", &mention)],
        )];
        let keys: Vec<&String> = entity.attributes.keys().filter(|k| *k != NAME_ATTRIBUTE).collect();
        let mut chosen: Vec<usize> =
            rand::seq::index::sample(&mut rng, keys.len(), config.review_attribute_mentions).into_vec();
        chosen.sort_unstable();
        for idx in chosen {
            let key = keys[idx];
            let sentence = schema.review_attribute_sentences.choose(&mut rng).expect("sentences");
            parts.push(fill(sentence, &[("key", &key.to_lowercase()), ("value", &entity.attributes[key])]));
        }
        let closer = schema.review_closers.choose(&mut rng).expect("closers");
        if !closer.is_empty() {
            parts.push(closer.clone());
        }

        let image_id = format!("img/{review_id}");
        let gold_image: Vec<f64> = images
            .get(entity.first_image().expect("synthetic entities have images"))
            .expect("entity image stored")
            .iter()
            .map(|&x| f64::from(x))
            .collect();
        images.insert(image_id.clone(), perturb(&mut rng, &gold_image, config.image_noise_sigma))?;

        gold.insert(review_id.clone(), entity.entity_id.clone());
        reviews.push(Review {
            review_id,
            text: parts.join(" "),
            mention: None,
            image_ids: vec![image_id],
            gold_entity_id: Some(entity.entity_id.clone()),
            extracted_attributes: BTreeMap::new(),
        });
    }
    Ok(SynthCorpus {
        kb,
        reviews,
        images,
        gold,
    })
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Pairs `(x, R·x)` for unit Gaussian `x` and one fixed random rotation `R`.
pub fn rotated_image_pairs(n: usize, d: usize, seed: u64) -> Vec<ImagePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rot: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rot.len() < d {
        let mut v = gaussian_unit(&mut rng, d);
        for r in &rot {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            rot.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    (0..n)
        .map(|_| {
            let review = gaussian_unit(&mut rng, d);
            let entity = rot
                .iter()
                .map(|row| row.iter().zip(&review).map(|(a, b)| a * b).sum())
                .collect();
            ImagePair { review, entity }
        })
        .collect()
}

/// NLI instances whose gold candidate alone has `attr_max = 1`.
pub fn separable_nli_instances(n: usize, candidates: usize, seed: u64) -> Vec<NliInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let gold = rng.random_range(0..candidates);
            let features = (0..candidates)
                .map(|j| {
                    let mut x = [0.0; FEATURE_DIM];
                    for v in x.iter_mut() {
                        *v = rng.random_range(0.0..0.5);
                    }
                    x[1] = if j == gold { 1.0 } else { 0.0 };
                    x
                })
                .collect();
            NliInstance { features, gold }
        })
        .collect()
}

/// A synthetic corpus run through annotation, prior indexing, retrieval and
/// the default split.
pub struct PreparedSynth {
    pub corpus: SynthCorpus,
    pub stopwords: Stopwords,
    pub priors: PriorIndex,
    pub candidates: Vec<CandidateSet>,
    pub split: Split,
}

impl PreparedSynth {
    pub fn link_context<'a>(&'a self, entailment: &'a dyn PairEntailmentScorer) -> LinkContext<'a> {
        LinkContext {
            kb: &self.corpus.kb,
            priors: &self.priors,
            stopwords: &self.stopwords,
            entailment,
            images: Some(&self.corpus.images),
        }
    }
}

/// Generates a corpus, detects mentions, extracts attributes, builds the
/// prior index, retrieves candidates for every review and splits it.
pub fn prepare_synthetic(
    config: &SynthConfig,
    retrieval: &RetrievalConfig,
    embedder: &dyn TextEmbedder,
    split_seed: u64,
) -> Result<PreparedSynth> {
    let mut corpus = generate_synthetic(config)?;
    let stopwords = Stopwords::default();
    detect_mentions(&mut corpus.reviews, &corpus.kb, embedder, &stopwords);
    extract_all_attributes(&mut corpus.reviews, &corpus.kb, &stopwords);
    let priors = build_prior_index(&corpus.kb, &stopwords);
    let entity_text = build_entity_text_store(&corpus.kb, embedder)?;
    let candidates = {
        let ctx = RetrievalContext {
            kb: &corpus.kb,
            entity_text: &entity_text,
            query_text: None,
            text_embedder: embedder,
            images: Some(&corpus.images),
            cross_scorer: &LexicalCrossScorer,
            priors: &priors,
        };
        retrieve_all(&corpus.reviews, &ctx, retrieval)?
    };
    let split = split(corpus.reviews.clone(), DEFAULT_RATIOS, split_seed)?;
    Ok(PreparedSynth {
        corpus,
        stopwords,
        priors,
        candidates,
        split,
    })
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "w/o_attribute")]
    WithoutAttribute,
    #[serde(rename = "w/o_image")]
    WithoutImage,
    #[serde(rename = "w/o_text")]
    WithoutText,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Random,
        Variant::Full,
        Variant::WithoutAttribute,
        Variant::WithoutImage,
        Variant::WithoutText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Random => "random",
            Variant::Full => "full",
            Variant::WithoutAttribute => "w/o_attribute",
            Variant::WithoutImage => "w/o_image",
            Variant::WithoutText => "w/o_text",
        }
    }

    /// Switches for this variant derived from the full system's settings:
    /// whether attribute features are used, and the fusion config.
    pub fn switches(self, full: &FusionConfig) -> (bool, FusionConfig) {
        match self {
            Variant::Random | Variant::Full => (true, full.clone()),
            Variant::WithoutAttribute => (
                false,
                FusionConfig {
                    apply_attribute_filter: false,
                    ..full.clone()
                },
            ),
            Variant::WithoutImage => (true, FusionConfig { lambda: 1.0, ..full.clone() }),
            Variant::WithoutText => (true, FusionConfig { lambda: 0.0, ..full.clone() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub hidden: usize,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    /// λ values tried on dev for the full system; empty keeps `fusion.lambda`.
    pub lambda_grid: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            hidden: NliHeadParams::DEFAULT_HIDDEN,
            train: TrainConfig::default(),
            fusion: FusionConfig::default(),
            lambda_grid: (0..=10).map(|i| f64::from(i) / 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub lambda: Option<f64>,
    pub use_attributes: bool,
    pub apply_attribute_filter: bool,
    pub disambiguation_f1: f64,
    pub end_to_end_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub train_reports: BTreeMap<String, LossReport>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<14} {:>7} {:>17} {:>13}\n", "variant", "lambda", "disambiguation_f1", "end_to_end_f1");
        for r in &self.rows {
            let lambda = r.lambda.map_or("-".to_string(), |l| format!("{l:.2}"));
            out.push_str(&format!(
                "{:<14} {:>7} {:>17.4} {:>13.4}\n",
                r.variant.name(),
                lambda,
                r.disambiguation_f1,
                r.end_to_end_f1
            ));
        }
        out
    }
}

/// Retrieved candidate sets for every split plus the shared inputs.
pub struct AblationData<'a> {
    pub ctx: &'a LinkContext<'a>,
    pub split: &'a Split,
    pub candidates: &'a [CandidateSet],
    pub adapter: Option<&'a AdapterParams>,
}

fn f1_pair(preds: &BTreeMap<String, Option<String>>, reviews: &[Review], sets: &[CandidateSet]) -> Result<(f64, f64)> {
    let gold = gold_map(reviews);
    let e2e = micro_f1(preds, &gold, Setting::EndToEnd, None)?;
    let dis = micro_f1(preds, &gold, Setting::Disambiguation, Some(sets))?;
    Ok((dis.f1, e2e.f1))
}

/// Trains the head with and without attribute features, tunes λ for the
/// full system on dev, and scores every variant on test in both settings.
pub fn run_ablation(data: &AblationData<'_>, config: &AblationConfig) -> Result<AblationTable> {
    let ctx = data.ctx;
    let split = data.split;
    let model_for = |use_attributes: bool| -> Result<(NliHeadParams, LossReport)> {
        let train = nli_instances(&split.train, data.candidates, ctx, use_attributes);
        let dev = nli_instances(&split.dev, data.candidates, ctx, use_attributes);
        let init = NliHeadParams::init(config.hidden, config.train.seed);
        train_nli_head(&train, &dev, init, &config.train)
    };
    let (head_attr, report_attr) = model_for(true)?;
    let (head_plain, report_plain) = model_for(false)?;

    let mut fusion = config.fusion.clone();
    if !config.lambda_grid.is_empty() {
        let grid: BTreeMap<String, Vec<f64>> = [("lambda".to_string(), config.lambda_grid.clone())].into();
        let model = Model {
            head: &head_attr,
            adapter: data.adapter,
        };
        let result = grid_search(&grid, |p| {
            let f = FusionConfig {
                lambda: p["lambda"],
                ..config.fusion.clone()
            };
            let preds = predict_all(&split.dev, data.candidates, ctx, model, &f, true)?;
            let gold = gold_map(&split.dev);
            Ok(micro_f1(&prediction_map(&preds), &gold, Setting::EndToEnd, None)?.f1)
        })?;
        fusion.lambda = result.best["lambda"];
    }

    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let (use_attributes, f) = variant.switches(&fusion);
        let preds = if variant == Variant::Random {
            let test_ids: BTreeSet<&str> = split.test.iter().map(|r| r.review_id.as_str()).collect();
            let sets: Vec<CandidateSet> = data
                .candidates
                .iter()
                .filter(|s| test_ids.contains(s.review_id.as_str()))
                .cloned()
                .collect();
            random_predictions(&sets, config.train.seed)
        } else {
            let head = if use_attributes { &head_attr } else { &head_plain };
            let model = Model {
                head,
                adapter: data.adapter,
            };
            prediction_map(&predict_all(&split.test, data.candidates, ctx, model, &f, use_attributes)?)
        };
        let (dis, e2e) = f1_pair(&preds, &split.test, data.candidates)?;
        rows.push(AblationRow {
            variant,
            lambda: (variant != Variant::Random).then_some(f.lambda),
            use_attributes: use_attributes && variant != Variant::Random,
            apply_attribute_filter: f.apply_attribute_filter && variant != Variant::Random,
            disambiguation_f1: dis,
            end_to_end_f1: e2e,
        });
    }
    let train_reports = [
        ("with_attributes".to_string(), report_attr),
        ("without_attributes".to_string(), report_plain),
    ]
    .into();
    Ok(AblationTable { rows, train_reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::Candidate;

    fn set(review: &str, ids: &[&str]) -> CandidateSet {
        CandidateSet {
            review_id: review.into(),
            candidates: ids
                .iter()
                .map(|id| Candidate {
                    entity_id: id.to_string(),
                    text_cos: 0.0,
                    cross_score: 0.0,
                    image_cos: 0.0,
                    fused_score: 0.0,
                })
                .collect(),
            gold_in_set: None,
            warnings: vec![],
        }
    }

    fn owned(pairs: &[(&str, Option<&str>)]) -> BTreeMap<String, Option<String>> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.map(str::to_string))).collect()
    }

    #[test]
    fn micro_f1_fixture() {
        let gold: BTreeMap<String, String> = (1..=5).map(|i| (format!("r{i}"), format!("e{i}"))).collect();
        let preds = owned(&[("r1", Some("e1")), ("r2", Some("e2")), ("r3", Some("e3")), ("r4", Some("x")), ("r5", None)]);
        let r = micro_f1(&preds, &gold, Setting::EndToEnd, None).unwrap();
        assert!((r.precision - 0.75).abs() < 1e-12);
        assert!((r.recall - 0.6).abs() < 1e-12);
        assert!((r.f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-12);
        assert_eq!((r.n_predicted, r.n_abstained, r.n_total), (4, 1, 5));
    }

    #[test]
    fn micro_f1_edge_cases() {
        let gold: BTreeMap<String, String> = [("a".to_string(), "x".to_string())].into();
        let r = micro_f1(&owned(&[("a", None)]), &gold, Setting::EndToEnd, None).unwrap();
        assert_eq!(r.f1, 0.0);
        assert!(matches!(
            micro_f1(&owned(&[("zzz", None)]), &gold, Setting::EndToEnd, None),
            Err(Error::UnknownReview(_))
        ));
        assert!(micro_f1(&BTreeMap::new(), &gold, Setting::Disambiguation, None).is_err());
        let sets = [set("a", &["y"])];
        let r = micro_f1(&BTreeMap::new(), &gold, Setting::Disambiguation, Some(&sets)).unwrap();
        assert_eq!(r.n_total, 0);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let reviews: Vec<Review> = (0..100)
            .map(|i| Review {
                review_id: format!("r{i:03}"),
                text: String::new(),
                mention: None,
                image_ids: vec![],
                gold_entity_id: None,
                extracted_attributes: BTreeMap::new(),
            })
            .collect();
        let s = split(reviews.clone(), DEFAULT_RATIOS, 3).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (75, 10, 15));
        let mut reversed = reviews.clone();
        reversed.reverse();
        assert_eq!(s, split(reversed, DEFAULT_RATIOS, 3).unwrap());
        assert!(split(reviews, (0.5, 0.5, 0.5), 0).is_err());
    }

    #[test]
    fn grid_search_rules() {
        let grid: BTreeMap<String, Vec<f64>> = [("b".to_string(), vec![1.0, 0.0]), ("a".to_string(), vec![2.0, 1.0])].into();
        let r = grid_search(&grid, |_| Ok(1.0)).unwrap();
        assert_eq!(r.table.len(), 4);
        assert_eq!(r.best, [("a".to_string(), 1.0), ("b".to_string(), 0.0)].into());
        let single: BTreeMap<String, Vec<f64>> = [("x".to_string(), vec![0.3])].into();
        assert_eq!(grid_search(&single, |p| Ok(p["x"])).unwrap().best["x"], 0.3);
        assert!(grid_search(&BTreeMap::new(), |_| Ok(0.0)).is_err());
    }

    #[test]
    fn schema_values_are_unambiguous() {
        let schema = &*SCHEMA;
        let mut owner: HashMap<String, &str> = HashMap::new();
        for (key, values) in &schema.attributes {
            assert!(values.len() >= 2);
            for v in values {
                for t in crate::textnorm::tokenize(v) {
                    let t = crate::textnorm::normalize_token(&t);
                    let prev = owner.insert(t.clone(), key);
                    assert!(prev.is_none_or(|p| p == key), "token {t} shared by {key} and {prev:?}");
                }
            }
        }
        for cat in &schema.categories {
            for k in &cat.keys {
                assert!(schema.attributes.contains_key(k));
            }
        }
    }

    #[test]
    fn synthetic_is_reproducible_and_planted() {
        let cfg = SynthConfig {
            n_categories: 2,
            entities_per_category: 8,
            n_reviews: 40,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.reviews, b.reviews);
        assert_eq!(a.images, b.images);
        assert_eq!(a.kb.len(), 16);
        for r in &a.reviews {
            assert!(a.kb.contains(r.gold_entity_id.as_deref().unwrap()));
        }
    }
}
