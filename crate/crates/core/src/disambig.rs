//! Entity disambiguation: attribute-entailment features and their MLP head,
//! the residual image adapter, λ-fusion of the two scores, and
//! attribute-mismatch filtering.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_embeddings, write_embeddings, EmbeddingStore, Entity, KnowledgeBase, Review};
use crate::encoders::{attribute_hypothesis, EntailmentPair, PairEntailmentScorer};
use crate::error::{Error, Result};
use crate::linalg::{cosine64, Matrix};
use crate::textnorm::{match_key, normalize_phrase, PriorIndex, Stopwords};

/// Number of per-candidate text features fed to the NLI head.
pub const FEATURE_DIM: usize = 6;

/// Mention used in hypotheses when a review has none.
const FALLBACK_MENTION: &str = "product";

/// Per-candidate summary of entailment and prior evidence.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AttributeFeatureVector {
    pub desc_score: f64,
    pub attr_max: f64,
    pub attr_mean: f64,
    pub attr_hit_fraction: f64,
    pub prior_e: f64,
    pub prior_c: f64,
}

impl AttributeFeatureVector {
    pub fn to_array(&self) -> [f64; FEATURE_DIM] {
        [
            self.desc_score,
            self.attr_max,
            self.attr_mean,
            self.attr_hit_fraction,
            self.prior_e,
            self.prior_c,
        ]
    }

    /// Same vector with the attribute-derived components zeroed.
    pub fn without_attributes(&self) -> Self {
        Self {
            attr_max: 0.0,
            attr_mean: 0.0,
            attr_hit_fraction: 0.0,
            ..*self
        }
    }
}

pub fn candidate_features(
    review: &Review,
    entity: &Entity,
    scorer: &dyn PairEntailmentScorer,
    priors: &PriorIndex,
) -> AttributeFeatureVector {
    let mention = review.mention_surface().unwrap_or(FALLBACK_MENTION);
    let desc_score = scorer.entail(&EntailmentPair {
        review_id: &review.review_id,
        entity_id: &entity.entity_id,
        attribute_key: None,
        mention,
        review_text: &review.text,
        hypothesis: &entity.description,
    });

    let scores: Vec<f64> = entity
        .attributes
        .iter()
        .map(|(key, value)| {
            let hypothesis = attribute_hypothesis(mention, key, value);
            scorer.entail(&EntailmentPair {
                review_id: &review.review_id,
                entity_id: &entity.entity_id,
                attribute_key: Some(key),
                mention,
                review_text: &review.text,
                hypothesis: &hypothesis,
            })
        })
        .collect();
    let n = scores.len().max(1) as f64;
    let attr_max = scores.iter().copied().fold(0.0, f64::max);
    let attr_mean = scores.iter().sum::<f64>() / n;
    let attr_hit_fraction = scores.iter().filter(|&&s| s >= 0.5).count() as f64 / n;

    let (prior_e, prior_c) = match review.mention_surface() {
        Some(surface) => {
            let phrase = normalize_phrase(surface);
            (
                priors.entity_prob(&phrase, &entity.entity_id),
                priors.category_prob(&phrase, entity.leaf_category()),
            )
        }
        None => (0.0, 0.0),
    };

    AttributeFeatureVector {
        desc_score,
        attr_max,
        attr_mean,
        attr_hit_fraction,
        prior_e,
        prior_c,
    }
}

// ---------------------------------------------------------------------------
// NLI head
// ---------------------------------------------------------------------------

/// One-hidden-layer tanh MLP: `s = w_o · tanh(x W_h + b_h) + b_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct NliHeadParams {
    pub w_h: Matrix,
    pub b_h: Vec<f64>,
    pub w_o: Vec<f64>,
    pub b_o: f64,
}

impl NliHeadParams {
    pub const DEFAULT_HIDDEN: usize = 16;

    pub fn zeros(hidden: usize) -> Self {
        Self {
            w_h: Matrix::zeros(FEATURE_DIM, hidden),
            b_h: vec![0.0; hidden],
            w_o: vec![0.0; hidden],
            b_o: 0.0,
        }
    }

    /// Weights uniform in ±1/√fan_in, biases zero.
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_h = Matrix::uniform(FEATURE_DIM, hidden, 1.0 / (FEATURE_DIM as f64).sqrt(), &mut rng);
        let w_o = Matrix::uniform(1, hidden, 1.0 / (hidden as f64).sqrt(), &mut rng);
        Self {
            w_h,
            b_h: vec![0.0; hidden],
            w_o: w_o.data().to_vec(),
            b_o: 0.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_h.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let h = self.b_h.len();
        if self.w_h.rows() != FEATURE_DIM || self.w_h.cols() != h || self.w_o.len() != h {
            return Err(Error::Shape(format!(
                "NLI head W_h {}x{}, b_h {}, w_o {}",
                self.w_h.rows(),
                self.w_h.cols(),
                h,
                self.w_o.len()
            )));
        }
        Ok(())
    }

    /// Score and hidden activations for one feature vector.
    pub fn forward(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_shapes()?;
        let mut a = self.w_h.left_mul(x)?;
        for (ai, bi) in a.iter_mut().zip(&self.b_h) {
            *ai = (*ai + bi).tanh();
        }
        let s = a.iter().zip(&self.w_o).map(|(a, w)| a * w).sum::<f64>() + self.b_o;
        Ok((s, a))
    }

    pub fn save(&self, store_path: &Path, manifest_path: &Path) -> Result<()> {
        let tensors = [
            ("W_h", vec![FEATURE_DIM, self.hidden()], self.w_h.data().to_vec()),
            ("b_h", vec![self.hidden()], self.b_h.clone()),
            ("w_o", vec![self.hidden()], self.w_o.clone()),
            ("b_o", vec![1], vec![self.b_o]),
        ];
        save_tensors("nli_head", &tensors, store_path, manifest_path)
    }

    pub fn load(store_path: &Path, manifest_path: &Path) -> Result<Self> {
        let t = load_tensors("nli_head", store_path, manifest_path)?;
        let (shape, w_h) = take(&t, "W_h", 2)?;
        let params = Self {
            w_h: Matrix::new(shape[0], shape[1], w_h)?,
            b_h: take(&t, "b_h", 1)?.1,
            w_o: take(&t, "w_o", 1)?.1,
            b_o: take(&t, "b_o", 1)?.1[0],
        };
        params.check_shapes()?;
        Ok(params)
    }
}

pub fn nli_score(features: &AttributeFeatureVector, params: &NliHeadParams) -> Result<f64> {
    let (s, _) = params.forward(&features.to_array())?;
    if !s.is_finite() {
        return Err(Error::NonFinite("NLI score"));
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// Image adapter
// ---------------------------------------------------------------------------

/// Residual adapters for the review side and the entity side.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub review_w1: Matrix,
    pub review_w2: Matrix,
    pub entity_w1: Matrix,
    pub entity_w2: Matrix,
}

impl AdapterParams {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            review_w1: Matrix::zeros(dim, hidden),
            review_w2: Matrix::zeros(hidden, dim),
            entity_w1: Matrix::zeros(dim, hidden),
            entity_w2: Matrix::zeros(hidden, dim),
        }
    }

    /// `W1` uniform in ±1/√dim, `W2` zero, so training starts from the
    /// identity map.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            review_w1: Matrix::uniform(dim, hidden, bound, &mut rng),
            review_w2: Matrix::zeros(hidden, dim),
            entity_w1: Matrix::uniform(dim, hidden, bound, &mut rng),
            entity_w2: Matrix::zeros(hidden, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.review_w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.review_w1.cols()
    }

    pub fn adapt_review(&self, h: &[f64]) -> Result<Vec<f64>> {
        adapt(h, &self.review_w1, &self.review_w2)
    }

    pub fn adapt_entity(&self, h: &[f64]) -> Result<Vec<f64>> {
        adapt(h, &self.entity_w1, &self.entity_w2)
    }

    pub fn save(&self, store_path: &Path, manifest_path: &Path) -> Result<()> {
        let (d, h) = (self.dim(), self.hidden());
        let tensors = [
            ("W^r_1", vec![d, h], self.review_w1.data().to_vec()),
            ("W^r_2", vec![h, d], self.review_w2.data().to_vec()),
            ("W^e_1", vec![d, h], self.entity_w1.data().to_vec()),
            ("W^e_2", vec![h, d], self.entity_w2.data().to_vec()),
        ];
        save_tensors("adapter", &tensors, store_path, manifest_path)
    }

    pub fn load(store_path: &Path, manifest_path: &Path) -> Result<Self> {
        let t = load_tensors("adapter", store_path, manifest_path)?;
        let matrix = |name: &str| -> Result<Matrix> {
            let (shape, data) = take(&t, name, 2)?;
            Matrix::new(shape[0], shape[1], data)
        };
        let params = Self {
            review_w1: matrix("W^r_1")?,
            review_w2: matrix("W^r_2")?,
            entity_w1: matrix("W^e_1")?,
            entity_w2: matrix("W^e_2")?,
        };
        let (d, h) = (params.dim(), params.hidden());
        for (name, m, shape) in [
            ("W^r_2", &params.review_w2, (h, d)),
            ("W^e_1", &params.entity_w1, (d, h)),
            ("W^e_2", &params.entity_w2, (h, d)),
        ] {
            if (m.rows(), m.cols()) != shape {
                return Err(Error::Shape(format!("{name} is {}x{}", m.rows(), m.cols())));
            }
        }
        Ok(params)
    }
}

/// `Ĥ = H + ReLU(H W1) W2`.
pub fn adapt(h: &[f64], w1: &Matrix, w2: &Matrix) -> Result<Vec<f64>> {
    if w1.cols() != w2.rows() || w2.cols() != h.len() {
        return Err(Error::Shape(format!(
            "adapter W1 {}x{}, W2 {}x{} for input of length {}",
            w1.rows(),
            w1.cols(),
            w2.rows(),
            w2.cols(),
            h.len()
        )));
    }
    let mut z = w1.left_mul(h)?;
    z.iter_mut().for_each(|v| *v = v.max(0.0));
    let branch = w2.left_mul(&z)?;
    Ok(h.iter().zip(branch).map(|(a, b)| a + b).collect())
}

/// Cosine between the adapted review and entity image embeddings.
pub fn image_score(review_embedding: &[f32], entity_embedding: &[f32], adapter: &AdapterParams) -> Result<f64> {
    let r: Vec<f64> = review_embedding.iter().map(|&x| f64::from(x)).collect();
    let e: Vec<f64> = entity_embedding.iter().map(|&x| f64::from(x)).collect();
    let r_hat = adapter.adapt_review(&r)?;
    let e_hat = adapter.adapt_entity(&e)?;
    Ok(cosine64(&r_hat, &e_hat).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Fusion and prediction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub lambda: f64,
    pub apply_attribute_filter: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            apply_attribute_filter: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub entity_id: String,
    pub s_t: f64,
    /// `None` when either side lacks an image.
    pub s_v: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub s_t: f64,
    pub s_v: Option<f64>,
    pub s: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub filtered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub review_id: String,
    pub prediction: Option<String>,
    pub scores: BTreeMap<String, CandidateScore>,
}

/// True when the entity contradicts an extracted attribute. A key the
/// entity lacks never contradicts.
pub fn attribute_conflict(
    entity: &Entity,
    extracted: &BTreeMap<String, String>,
    stopwords: &Stopwords,
) -> bool {
    extracted.iter().any(|(key, value)| {
        entity
            .attributes
            .get(key)
            .is_some_and(|v| match_key(v, stopwords) != match_key(value, stopwords))
    })
}

/// Fuses `s = λ·s_t + (1-λ)·s_v`, applies the attribute filter, and picks
/// the argmax (ties by ascending entity id). When no candidate has an image
/// score the review is treated as imageless and λ is forced to 1; a single
/// missing image among scored candidates contributes `s_v = 0`. An empty
/// surviving set abstains.
pub fn fuse_and_predict(
    review_id: &str,
    candidates: &[ScoredCandidate],
    kb: &KnowledgeBase,
    config: &FusionConfig,
    extracted: &BTreeMap<String, String>,
    stopwords: &Stopwords,
) -> Prediction {
    let imageless = candidates.iter().all(|c| c.s_v.is_none());
    let lambda = if imageless { 1.0 } else { config.lambda };

    let mut scores = BTreeMap::new();
    let mut best: Option<(&str, f64)> = None;
    for c in candidates {
        let s = lambda * c.s_t + (1.0 - lambda) * c.s_v.unwrap_or(0.0);
        let filtered = config.apply_attribute_filter
            && kb
                .get(&c.entity_id)
                .is_some_and(|e| attribute_conflict(e, extracted, stopwords));
        if !filtered {
            let better = match best {
                None => true,
                Some((id, bs)) => s > bs || (s == bs && c.entity_id.as_str() < id),
            };
            if better {
                best = Some((&c.entity_id, s));
            }
        }
        scores.insert(
            c.entity_id.clone(),
            CandidateScore {
                s_t: c.s_t,
                s_v: c.s_v,
                s,
                filtered,
            },
        );
    }
    Prediction {
        review_id: review_id.to_string(),
        prediction: best.map(|(id, _)| id.to_string()),
        scores,
    }
}

// ---------------------------------------------------------------------------
// Parameter persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ParamManifest {
    kind: String,
    shapes: BTreeMap<String, Vec<usize>>,
}

type Tensor<'a> = (&'a str, Vec<usize>, Vec<f64>);

/// Tensors go in one AMEV1 store, flattened row-major and zero-padded to
/// the longest tensor; the manifest records the true shapes.
fn save_tensors(kind: &str, tensors: &[Tensor<'_>], store_path: &Path, manifest_path: &Path) -> Result<()> {
    let width = tensors.iter().map(|t| t.2.len()).max().unwrap_or(1).max(1);
    let mut store = EmbeddingStore::new(width, false)?;
    let mut shapes = BTreeMap::new();
    for (name, shape, data) in tensors {
        let mut row: Vec<f32> = data.iter().map(|&x| x as f32).collect();
        row.resize(width, 0.0);
        store.insert(*name, row)?;
        shapes.insert(name.to_string(), shape.clone());
    }
    write_embeddings(&store, store_path)?;
    let manifest = ParamManifest {
        kind: kind.to_string(),
        shapes,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(manifest_path, text + "\n").map_err(|e| Error::io(manifest_path, e))
}

fn load_tensors(kind: &str, store_path: &Path, manifest_path: &Path) -> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: ParamManifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(manifest_path, 1, e))?;
    if manifest.kind != kind {
        return Err(Error::Format(format!(
            "{} holds `{}` parameters, expected `{kind}`",
            manifest_path.display(),
            manifest.kind
        )));
    }
    let store = read_embeddings(store_path)?;
    let mut out = BTreeMap::new();
    for (name, shape) in manifest.shapes {
        let len: usize = shape.iter().product();
        let row = store
            .get(&name)
            .ok_or_else(|| Error::Corruption(format!("tensor `{name}` missing from store")))?;
        if len > row.len() {
            return Err(Error::Corruption(format!(
                "tensor `{name}` needs {len} values, store rows hold {}",
                row.len()
            )));
        }
        out.insert(name, (shape, row[..len].iter().map(|&x| f64::from(x)).collect()));
    }
    Ok(out)
}

fn take(
    tensors: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    name: &str,
    rank: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (shape, data) = tensors
        .get(name)
        .ok_or_else(|| Error::Corruption(format!("manifest lacks tensor `{name}`")))?;
    if shape.len() != rank {
        return Err(Error::Shape(format!("tensor `{name}` has rank {}, expected {rank}", shape.len())));
    }
    Ok((shape.clone(), data.clone()))
}
