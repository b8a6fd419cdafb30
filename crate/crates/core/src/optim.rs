//! Losses with hand-derived gradients, minibatch training for the NLI head
//! and the image adapter, and a finite-difference gradient checker.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::disambig::{AdapterParams, NliHeadParams, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Softmax cross-entropy of `scores` against `gold`, with its gradient
/// `softmax(scores) - one_hot(gold)`.
pub fn ce_loss(scores: &[f64], gold: usize) -> Result<(f64, Vec<f64>)> {
    if scores.is_empty() {
        return Err(Error::Empty("candidate scores"));
    }
    if gold >= scores.len() {
        return Err(Error::InvalidArgument(format!(
            "gold index {gold} out of range for {} scores",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("candidate scores"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = (z.ln() + max - scores[gold]).max(0.0);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[gold] -= 1.0;
    Ok((loss, grad))
}

/// Output of [`contrastive_loss`].
#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub review_grads: Vec<Vec<f64>>,
    pub entity_grads: Vec<Vec<f64>>,
    /// Row-wise cosine matrix, `cos[i][j] = cos(review_i, entity_j)`.
    pub cosines: Vec<Vec<f64>>,
}

/// Mean over rows of `-log softmax_j cos(r_i, e_j)` at the diagonal.
pub fn contrastive_loss(reviews: &[Vec<f64>], entities: &[Vec<f64>]) -> Result<ContrastiveOutput> {
    let b = reviews.len();
    if b == 0 {
        return Err(Error::Empty("contrastive batch"));
    }
    if entities.len() != b {
        return Err(Error::Shape(format!("{b} review rows but {} entity rows", entities.len())));
    }
    let d = reviews[0].len();
    if reviews.iter().chain(entities).any(|v| v.len() != d) {
        return Err(Error::Shape("ragged contrastive batch".into()));
    }
    let rn: Vec<f64> = reviews.iter().map(|v| norm(v)).collect();
    let en: Vec<f64> = entities.iter().map(|v| norm(v)).collect();
    if rn.iter().chain(&en).any(|&n| n == 0.0) {
        return Err(Error::InvalidArgument("zero-norm vector in contrastive batch".into()));
    }
    if rn.iter().chain(&en).any(|n| !n.is_finite()) {
        return Err(Error::NonFinite("contrastive batch"));
    }

    let cos: Vec<Vec<f64>> = (0..b)
        .map(|i| (0..b).map(|j| dot(&reviews[i], &entities[j]) / (rn[i] * en[j])).collect())
        .collect();

    let mut loss = 0.0;
    // g[i][j] = dL/dcos_ij
    let mut g = vec![vec![0.0; b]; b];
    for i in 0..b {
        let (l, grad) = ce_loss(&cos[i], i)?;
        loss += l;
        for j in 0..b {
            g[i][j] = grad[j] / b as f64;
        }
    }
    loss /= b as f64;

    let mut review_grads = vec![vec![0.0; d]; b];
    let mut entity_grads = vec![vec![0.0; d]; b];
    for i in 0..b {
        for j in 0..b {
            let gij = g[i][j];
            if gij == 0.0 {
                continue;
            }
            let inv = 1.0 / (rn[i] * en[j]);
            let cr = cos[i][j] / (rn[i] * rn[i]);
            let ce = cos[i][j] / (en[j] * en[j]);
            for k in 0..d {
                review_grads[i][k] += gij * (entities[j][k] * inv - cr * reviews[i][k]);
                entity_grads[j][k] += gij * (reviews[i][k] * inv - ce * entities[j][k]);
            }
        }
    }
    Ok(ContrastiveOutput {
        loss,
        review_grads,
        entity_grads,
        cosines: cos,
    })
}

// ---------------------------------------------------------------------------
// Flat parameter views
// ---------------------------------------------------------------------------

/// Parameters that can be viewed as one flat vector for optimizers and
/// gradient checks.
pub trait FlatParams {
    fn flatten(&self) -> Vec<f64>;
    fn assign(&mut self, flat: &[f64]);
}

impl FlatParams for NliHeadParams {
    /// Layout: `W_h` row-major, `b_h`, `w_o`, `b_o`.
    fn flatten(&self) -> Vec<f64> {
        let mut v = self.w_h.data().to_vec();
        v.extend(&self.b_h);
        v.extend(&self.w_o);
        v.push(self.b_o);
        v
    }

    fn assign(&mut self, flat: &[f64]) {
        let (wh, rest) = flat.split_at(self.w_h.data().len());
        let (bh, rest) = rest.split_at(self.b_h.len());
        let (wo, rest) = rest.split_at(self.w_o.len());
        self.w_h.data_mut().copy_from_slice(wh);
        self.b_h.copy_from_slice(bh);
        self.w_o.copy_from_slice(wo);
        self.b_o = rest[0];
    }
}

impl FlatParams for AdapterParams {
    /// Layout: `W^r_1`, `W^r_2`, `W^e_1`, `W^e_2`, each row-major.
    fn flatten(&self) -> Vec<f64> {
        [&self.review_w1, &self.review_w2, &self.entity_w1, &self.entity_w2]
            .iter()
            .flat_map(|m| m.data().iter().copied())
            .collect()
    }

    fn assign(&mut self, flat: &[f64]) {
        let mut rest = flat;
        for m in [
            &mut self.review_w1,
            &mut self.review_w2,
            &mut self.entity_w1,
            &mut self.entity_w2,
        ] {
            let (head, tail) = rest.split_at(m.data().len());
            m.data_mut().copy_from_slice(head);
            rest = tail;
        }
    }
}

// ---------------------------------------------------------------------------
// Backprop
// ---------------------------------------------------------------------------

/// One training instance for the NLI head: feature rows for the retrieved
/// candidates and the index of the gold candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliInstance {
    pub features: Vec<[f64; FEATURE_DIM]>,
    pub gold: usize,
}

/// Accumulates into `grad` the head gradient for upstream score gradients
/// `upstream[k] = dL/ds_k`.
pub fn nli_head_backward(
    params: &NliHeadParams,
    features: &[[f64; FEATURE_DIM]],
    upstream: &[f64],
    grad: &mut NliHeadParams,
) -> Result<()> {
    for (x, &gs) in features.iter().zip(upstream) {
        let (_, a) = params.forward(x)?;
        grad.b_o += gs;
        let mut delta = vec![0.0; a.len()];
        for (k, ak) in a.iter().enumerate() {
            grad.w_o[k] += gs * ak;
            delta[k] = gs * params.w_o[k] * (1.0 - ak * ak);
        }
        for (bk, dk) in grad.b_h.iter_mut().zip(&delta) {
            *bk += dk;
        }
        grad.w_h.add_outer(x, &delta, 1.0);
    }
    Ok(())
}

/// Mean cross-entropy over `batch` and its gradient.
pub fn nli_batch_loss(params: &NliHeadParams, batch: &[&NliInstance]) -> Result<(f64, NliHeadParams)> {
    if batch.is_empty() {
        return Err(Error::Empty("NLI batch"));
    }
    let mut grad = NliHeadParams::zeros(params.hidden());
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for inst in batch {
        let scores = inst
            .features
            .iter()
            .map(|x| params.forward(x).map(|(s, _)| s))
            .collect::<Result<Vec<_>>>()?;
        let (loss, g) = ce_loss(&scores, inst.gold)?;
        total += loss;
        let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
        nli_head_backward(params, &inst.features, &g, &mut grad)?;
    }
    Ok((total * scale, grad))
}

struct AdaptCache {
    z: Vec<f64>,
    u: Vec<f64>,
    out: Vec<f64>,
}

fn adapt_forward(h: &[f64], w1: &Matrix, w2: &Matrix) -> Result<AdaptCache> {
    let z = w1.left_mul(h)?;
    let u: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
    let branch = w2.left_mul(&u)?;
    let out = h.iter().zip(branch).map(|(a, b)| a + b).collect();
    Ok(AdaptCache { z, u, out })
}

fn adapt_backward(h: &[f64], cache: &AdaptCache, w2: &Matrix, g_out: &[f64], g_w1: &mut Matrix, g_w2: &mut Matrix) -> Result<()> {
    g_w2.add_outer(&cache.u, g_out, 1.0);
    let mut g_z = w2.right_mul(g_out)?;
    for (g, z) in g_z.iter_mut().zip(&cache.z) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
    g_w1.add_outer(h, &g_z, 1.0);
    Ok(())
}

/// Contrastive loss of an adapted batch and its gradient wrt all four
/// adapter matrices.
pub fn adapter_batch_loss(
    params: &AdapterParams,
    reviews: &[&[f64]],
    entities: &[&[f64]],
) -> Result<(f64, AdapterParams)> {
    let rc = reviews
        .iter()
        .map(|h| adapt_forward(h, &params.review_w1, &params.review_w2))
        .collect::<Result<Vec<_>>>()?;
    let ec = entities
        .iter()
        .map(|h| adapt_forward(h, &params.entity_w1, &params.entity_w2))
        .collect::<Result<Vec<_>>>()?;
    let r_hat: Vec<Vec<f64>> = rc.iter().map(|c| c.out.clone()).collect();
    let e_hat: Vec<Vec<f64>> = ec.iter().map(|c| c.out.clone()).collect();
    let out = contrastive_loss(&r_hat, &e_hat)?;

    let mut grad = AdapterParams::zeros(params.dim(), params.hidden());
    for i in 0..reviews.len() {
        adapt_backward(
            reviews[i],
            &rc[i],
            &params.review_w2,
            &out.review_grads[i],
            &mut grad.review_w1,
            &mut grad.review_w2,
        )?;
        adapt_backward(
            entities[i],
            &ec[i],
            &params.entity_w2,
            &out.entity_grads[i],
            &mut grad.entity_w1,
            &mut grad.entity_w2,
        )?;
    }
    Ok((out.loss, grad))
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl Optimizer {
    fn new(cfg: &TrainConfig, n: usize) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd { lr: cfg.learning_rate },
            OptimizerKind::Adam => Optimizer::Adam {
                lr: cfg.learning_rate,
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adam { lr, m, v, t } => {
                *t += 1;
                let c1 = 1.0 - BETA1.powi(*t);
                let c2 = 1.0 - BETA2.powi(*t);
                for i in 0..params.len() {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    params[i] -= *lr * m_hat / (v_hat.sqrt() + EPSILON);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Loss reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_acc: f64,
}

/// Per-epoch losses; row 0 is measured before any update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epochs: Vec<EpochRecord>,
}

impl LossReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,dev_loss,dev_acc\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.dev_loss, r.dev_acc);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn first(&self) -> Option<&EpochRecord> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

// ---------------------------------------------------------------------------
// NLI head training
// ---------------------------------------------------------------------------

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and accuracy of the head over `data`.
pub fn evaluate_nli(params: &NliHeadParams, data: &[NliInstance]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Empty("NLI evaluation set"));
    }
    let mut loss = 0.0;
    let mut hits = 0usize;
    for inst in data {
        let scores = inst
            .features
            .iter()
            .map(|x| params.forward(x).map(|(s, _)| s))
            .collect::<Result<Vec<_>>>()?;
        loss += ce_loss(&scores, inst.gold)?.0;
        hits += usize::from(argmax(&scores) == inst.gold);
    }
    let n = data.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Trains the head by minibatch descent on mean cross-entropy and returns
/// the parameters with the lowest dev loss. An empty dev set falls back to
/// the training set for selection.
pub fn train_nli_head(
    train: &[NliInstance],
    dev: &[NliInstance],
    params: NliHeadParams,
    cfg: &TrainConfig,
) -> Result<(NliHeadParams, LossReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("NLI training set"));
    }
    for inst in train.iter().chain(dev) {
        if inst.gold >= inst.features.len() {
            return Err(Error::InvalidArgument(format!(
                "gold index {} outside {} candidates",
                inst.gold,
                inst.features.len()
            )));
        }
    }
    let dev = if dev.is_empty() {
        log::warn!("empty dev set; selecting NLI head on training loss");
        train
    } else {
        dev
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = params;
    let mut flat = params.flatten();
    let mut opt = Optimizer::new(cfg, flat.len());
    let mut report = LossReport::default();

    let (train_loss, _) = evaluate_nli(&params, train)?;
    let (dev_loss, dev_acc) = evaluate_nli(&params, dev)?;
    report.epochs.push(EpochRecord {
        epoch: 0,
        train_loss,
        dev_loss,
        dev_acc,
    });
    let mut best = (dev_loss, params.clone());

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&NliInstance> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grad) = nli_batch_loss(&params, &batch)?;
            epoch_loss += loss * chunk.len() as f64;
            opt.step(&mut flat, &grad.flatten());
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("NLI head parameters"));
            }
            params.assign(&flat);
        }
        let (dev_loss, dev_acc) = evaluate_nli(&params, dev)?;
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            dev_loss,
            dev_acc,
        });
        if dev_loss < best.0 {
            best = (dev_loss, params.clone());
        }
    }
    Ok((best.1, report))
}

// ---------------------------------------------------------------------------
// Adapter training
// ---------------------------------------------------------------------------

/// A review image embedding and its gold entity's image embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub review: Vec<f64>,
    pub entity: Vec<f64>,
}

fn pair_batches<'a>(pairs: &'a [ImagePair], order: &[usize], batch_size: usize) -> Vec<(Vec<&'a [f64]>, Vec<&'a [f64]>)> {
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2 || order.len() < 2)
        .map(|c| {
            (
                c.iter().map(|&i| pairs[i].review.as_slice()).collect(),
                c.iter().map(|&i| pairs[i].entity.as_slice()).collect(),
            )
        })
        .collect()
}

/// Mean contrastive loss and in-batch retrieval accuracy over contiguous
/// batches of `pairs` in their given order.
pub fn evaluate_adapter(params: &AdapterParams, pairs: &[ImagePair], batch_size: usize) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Empty("adapter evaluation set"));
    }
    let order: Vec<usize> = (0..pairs.len()).collect();
    let mut loss = 0.0;
    let mut hits = 0usize;
    let mut rows = 0usize;
    for (r, e) in pair_batches(pairs, &order, batch_size) {
        let r_hat = r.iter().map(|h| params.adapt_review(h)).collect::<Result<Vec<_>>>()?;
        let e_hat = e.iter().map(|h| params.adapt_entity(h)).collect::<Result<Vec<_>>>()?;
        let out = contrastive_loss(&r_hat, &e_hat)?;
        loss += out.loss * r.len() as f64;
        hits += out.cosines.iter().enumerate().filter(|(i, row)| argmax(row) == *i).count();
        rows += r.len();
    }
    Ok((loss / rows as f64, hits as f64 / rows as f64))
}

/// In-batch retrieval accuracy: the fraction of reviews whose adapted
/// embedding is closest to their own gold entity within the batch.
pub fn in_batch_accuracy(params: &AdapterParams, pairs: &[ImagePair], batch_size: usize) -> Result<f64> {
    Ok(evaluate_adapter(params, pairs, batch_size)?.1)
}

fn count_duplicate_entities(batch: &[&[f64]]) -> usize {
    let mut dups = 0;
    for i in 0..batch.len() {
        if batch[..i].iter().any(|e| *e == batch[i]) {
            dups += 1;
        }
    }
    dups
}

/// Trains both adapter sides with in-batch negatives over batches drawn by
/// a seeded shuffle each epoch. Returns the lowest-dev-loss parameters.
pub fn train_adapter(
    train: &[ImagePair],
    dev: &[ImagePair],
    params: AdapterParams,
    cfg: &TrainConfig,
) -> Result<(AdapterParams, LossReport)> {
    cfg.validate()?;
    if cfg.batch_size < 2 {
        return Err(Error::InvalidArgument("contrastive training needs batch_size >= 2".into()));
    }
    if train.len() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "adapter training needs at least batch_size={} pairs, got {}",
            cfg.batch_size,
            train.len()
        )));
    }
    let d = params.dim();
    if let Some(p) = train.iter().chain(dev).find(|p| p.review.len() != d || p.entity.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: p.review.len().max(p.entity.len()),
        });
    }
    let dev = if dev.is_empty() {
        log::warn!("empty dev set; selecting adapter on training loss");
        train
    } else {
        dev
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = params;
    let mut flat = params.flatten();
    let mut opt = Optimizer::new(cfg, flat.len());
    let mut report = LossReport::default();

    let (train_loss, _) = evaluate_adapter(&params, train, cfg.batch_size)?;
    let (dev_loss, dev_acc) = evaluate_adapter(&params, dev, cfg.batch_size)?;
    report.epochs.push(EpochRecord {
        epoch: 0,
        train_loss,
        dev_loss,
        dev_acc,
    });
    let mut best = (dev_loss, params.clone());

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut duplicates = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut rows = 0usize;
        for (r, e) in pair_batches(train, &order, cfg.batch_size) {
            duplicates += count_duplicate_entities(&e);
            let (loss, grad) = adapter_batch_loss(&params, &r, &e)?;
            epoch_loss += loss * r.len() as f64;
            rows += r.len();
            opt.step(&mut flat, &grad.flatten());
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("adapter parameters"));
            }
            params.assign(&flat);
        }
        let (dev_loss, dev_acc) = evaluate_adapter(&params, dev, cfg.batch_size)?;
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / rows as f64,
            dev_loss,
            dev_acc,
        });
        if dev_loss < best.0 {
            best = (dev_loss, params.clone());
        }
    }
    if duplicates > 0 {
        log::info!("{duplicates} duplicate entity embeddings shared a training batch");
    }
    Ok((best.1, report))
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Compares the analytic gradient returned by `loss_fn` with central
/// differences on `probe_count` seeded random coordinates (all coordinates
/// when there are fewer). Returns the maximum relative error
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(loss_fn: F, params: &[f64], probe_count: usize, h: f64, seed: u64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(params);
    let n = params.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes: Vec<usize> = if probe_count >= n {
        (0..n).collect()
    } else {
        index::sample(&mut rng, n, probe_count).into_vec()
    };
    let mut x = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in probes {
        let orig = x[i];
        x[i] = orig + h;
        let up = loss_fn(&x).0;
        x[i] = orig - h;
        let down = loss_fn(&x).0;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}
