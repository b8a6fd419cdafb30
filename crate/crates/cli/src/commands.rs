//! One function per subcommand. Each reads its inputs through the
//! [`Workspace`], writes its artifacts and returns a one-line summary.

use std::collections::BTreeMap;

use attrlink::corpus::{load_reviews, EmbeddingStore, KnowledgeBase, Review};
use attrlink::disambig::{AdapterParams, FusionConfig, NliHeadParams, Prediction};
use attrlink::encoders::{
    load_scored_pairs, CrossScorer, HashEmbedder, ImageEmbedder, LexicalCrossScorer, LexicalEntailment,
    PairEntailmentScorer,
};
use attrlink::evalbench::{
    generate_synthetic, grid_search, micro_f1, prediction_map, read_gold, run_ablation, split, AblationConfig,
    AblationData, MicroF1Report, Setting, Split,
};
use attrlink::mining::filter_reviews;
use attrlink::optim::{train_adapter, train_nli_head};
use attrlink::pipeline::{
    detect_mentions, extract_all_attributes, gold_map, image_pairs, nli_instances, predict_all, read_predictions,
    write_predictions, LinkContext, Model,
};
use attrlink::retrieval::{
    build_entity_text_store, recall_at_k, retrieve_all, write_candidates, CandidateSet, RetrievalConfig,
    RetrievalContext,
};
use attrlink::textnorm::{build_prior_index, PriorIndex, Stopwords};
use serde_json::{json, Map, Value};

use crate::error::CliError;
use crate::workspace::*;

type CmdResult = Result<String, CliError>;

pub fn synth(ws: &mut Workspace) -> CmdResult {
    let corpus = generate_synthetic(&ws.config.synth)?;
    let dir = ws.path(&ws.config.paths.synth_dir);
    corpus.write(&dir)?;
    for name in ["entities.jsonl", "reviews.jsonl", "images.amev", "gold.jsonl"] {
        ws.output(&dir.join(name));
    }
    Ok(format!(
        "synth: {} entities, {} reviews → {}",
        corpus.kb.len(),
        corpus.reviews.len(),
        dir.display()
    ))
}

pub fn ingest(ws: &mut Workspace) -> CmdResult {
    let kb = ws.kb()?;
    let path = ws.input(&ws.path(&ws.config.paths.reviews))?;
    let mut loaded = load_reviews(&path, ws.config.max_tokens)?;
    sort_unique(&mut loaded.reviews, &path)?;
    let unknown_gold = loaded
        .reviews
        .iter()
        .filter(|r| r.gold_entity_id.as_deref().is_some_and(|g| !kb.contains(g)))
        .count();
    if unknown_gold > 0 {
        log::warn!("{unknown_gold} reviews name a gold entity missing from the knowledge base");
    }
    ws.write_reviews(INGESTED, &loaded.reviews)?;
    let rejected = loaded
        .too_long
        .iter()
        .map(|r| Rejected {
            review_id: r.review_id.clone(),
            reason: RejectReason::TooLong,
            features: None,
        })
        .collect();
    ws.update_rejected(RejectReason::TooLong, rejected)?;
    Ok(format!(
        "ingest: {} entities, {} reviews kept, {} too long",
        kb.len(),
        loaded.reviews.len(),
        loaded.dropped()
    ))
}

pub fn priors(ws: &mut Workspace) -> CmdResult {
    let kb = ws.kb()?;
    let stop = ws.stopwords()?;
    let index = build_prior_index(&kb, &stop);
    let p = ws.output(&ws.path(PRIORS));
    index.write(&p)?;
    Ok(format!("priors: {} phrases", index.len()))
}

fn text_embedder(ws: &Workspace) -> Result<HashEmbedder, CliError> {
    Ok(HashEmbedder::new(ws.config.text_embedder.dim, ws.config.text_embedder.seed)?)
}

pub fn mentions(ws: &mut Workspace) -> CmdResult {
    let kb = ws.kb()?;
    let stop = ws.stopwords()?;
    let embedder = text_embedder(ws)?;
    let mut reviews = ws.stage_reviews(INGESTED)?;
    detect_mentions(&mut reviews, &kb, &embedder, &stop);
    extract_all_attributes(&mut reviews, &kb, &stop);
    let (kept, missing): (Vec<Review>, Vec<Review>) = reviews.into_iter().partition(|r| r.mention.is_some());
    ws.write_reviews(MENTIONS, &kept)?;
    let rejected = missing
        .iter()
        .map(|r| Rejected {
            review_id: r.review_id.clone(),
            reason: RejectReason::NoMention,
            features: None,
        })
        .collect();
    ws.update_rejected(RejectReason::NoMention, rejected)?;
    Ok(format!("mentions: {} found, {} without mention", kept.len(), missing.len()))
}

pub fn filter(ws: &mut Workspace) -> CmdResult {
    let kb = ws.kb()?;
    let stop = ws.stopwords()?;
    let embedder = text_embedder(ws)?;
    let images = ws.images()?;
    let reviews = ws.stage_reviews(MENTIONS)?;
    let outcome = filter_reviews(
        reviews,
        &kb,
        &ws.config.filter,
        &embedder,
        images.as_ref().map(|s| s as &dyn ImageEmbedder),
        &stop,
    )?;
    ws.write_reviews(FILTERED, &outcome.kept)?;
    let rejected = outcome
        .dropped
        .iter()
        .map(|(r, f)| Rejected {
            review_id: r.review_id.clone(),
            reason: RejectReason::Uninformative,
            features: Some(*f),
        })
        .collect();
    ws.update_rejected(RejectReason::Uninformative, rejected)?;

    let parts = split(outcome.kept.clone(), ws.config.split_ratios(), ws.config.seed)?;
    let ids = |v: &[Review]| {
        let mut ids: Vec<String> = v.iter().map(|r| r.review_id.clone()).collect();
        ids.sort();
        ids
    };
    let split_ids = SplitIds {
        train: ids(&parts.train),
        dev: ids(&parts.dev),
        test: ids(&parts.test),
    };
    ws.write_json(SPLIT, &split_ids)?;
    Ok(format!(
        "filter: {} kept, {} uninformative; split {}/{}/{}",
        outcome.kept.len(),
        outcome.dropped.len(),
        split_ids.train.len(),
        split_ids.dev.len(),
        split_ids.test.len()
    ))
}

/// Everything retrieval and linking read besides the reviews.
struct Resources {
    kb: KnowledgeBase,
    stop: Stopwords,
    priors: PriorIndex,
    images: Option<EmbeddingStore>,
    embedder: HashEmbedder,
    entity_text: EmbeddingStore,
    query_text: Option<EmbeddingStore>,
    cross: Box<dyn CrossScorer>,
    entail: Box<dyn PairEntailmentScorer>,
}

impl Resources {
    fn load(ws: &mut Workspace, for_retrieval: bool) -> Result<Self, CliError> {
        let kb = ws.kb()?;
        let stop = ws.stopwords()?;
        let priors = ws.priors()?;
        let images = ws.images()?;
        let embedder = text_embedder(ws)?;
        let default = ws.config.score_default;
        let paths = ws.config.paths.clone();

        let (entity_text, query_text, cross): (EmbeddingStore, Option<EmbeddingStore>, Box<dyn CrossScorer>) =
            if for_retrieval {
                let entity_text = match ws.optional_store(paths.entity_text_embeddings)? {
                    Some(s) => s,
                    None => build_entity_text_store(&kb, &embedder)?,
                };
                let query_text = ws.optional_store(paths.review_text_embeddings)?;
                let cross: Box<dyn CrossScorer> = match paths.cross_scores {
                    Some(p) => Box::new(load_scored_pairs(&ws.input(&ws.path(p))?, default)?),
                    None => Box::new(LexicalCrossScorer),
                };
                (entity_text, query_text, cross)
            } else {
                (EmbeddingStore::new(1, false)?, None, Box::new(LexicalCrossScorer))
            };
        let entail: Box<dyn PairEntailmentScorer> = match paths.entailment_scores {
            Some(p) => Box::new(load_scored_pairs(&ws.input(&ws.path(p))?, default)?),
            None => Box::new(LexicalEntailment::new(stop.clone())),
        };
        Ok(Self {
            kb,
            stop,
            priors,
            images,
            embedder,
            entity_text,
            query_text,
            cross,
            entail,
        })
    }

    fn retrieval(&self) -> RetrievalContext<'_> {
        RetrievalContext {
            kb: &self.kb,
            entity_text: &self.entity_text,
            query_text: self.query_text.as_ref(),
            text_embedder: &self.embedder,
            images: self.images.as_ref().map(|s| s as &dyn ImageEmbedder),
            cross_scorer: self.cross.as_ref(),
            priors: &self.priors,
        }
    }

    fn link(&self) -> LinkContext<'_> {
        LinkContext {
            kb: &self.kb,
            priors: &self.priors,
            stopwords: &self.stop,
            entailment: self.entail.as_ref(),
            images: self.images.as_ref(),
        }
    }
}

fn recall_map(sets: &[CandidateSet], gold: &BTreeMap<String, String>, ks: &[usize]) -> Result<Value, CliError> {
    let labelled: Vec<CandidateSet> = sets.iter().filter(|s| gold.contains_key(&s.review_id)).cloned().collect();
    let recall = recall_at_k(&labelled, gold, ks)?;
    Ok(Value::Object(
        recall.into_iter().map(|(k, v)| (k.to_string(), json!(v))).collect(),
    ))
}

pub fn retrieve(ws: &mut Workspace) -> CmdResult {
    let res = Resources::load(ws, true)?;
    let reviews = ws.stage_reviews(FILTERED)?;
    let sets = retrieve_all(&reviews, &res.retrieval(), &ws.config.retrieval)?;
    let p = ws.output(&ws.path(CANDIDATES));
    write_candidates(&sets, &p)?;
    let recall = recall_map(&sets, &gold_map(&reviews), &ws.config.link.recall_ks)?;
    Ok(format!("retrieve: {} candidate sets, recall@k {recall}", sets.len()))
}

/// Splits the filtered reviews by the recorded split ids.
fn load_split(ws: &mut Workspace) -> Result<Split, CliError> {
    let reviews = ws.stage_reviews(FILTERED)?;
    let ids = ws.split()?;
    let pick = |name: &str| {
        let wanted = ids.part(name).expect("known split name");
        reviews.iter().filter(|r| wanted.contains(r.review_id.as_str())).cloned().collect()
    };
    Ok(Split {
        train: pick("train"),
        dev: pick("dev"),
        test: pick("test"),
    })
}

pub fn train_adapter_cmd(ws: &mut Workspace) -> CmdResult {
    let kb = ws.kb()?;
    let images = ws
        .images()?
        .ok_or_else(|| CliError::Usage("train-adapter needs paths.images".into()))?;
    let split = load_split(ws)?;
    let train = image_pairs(&split.train, &kb, &images);
    let dev = image_pairs(&split.dev, &kb, &images);
    let init = AdapterParams::init(images.dim(), ws.config.model.adapter_hidden, ws.config.seed);
    let (params, report) = train_adapter(&train, &dev, init, &ws.config.train)?;
    let store = ws.output(&ws.path(ADAPTER));
    let manifest = ws.output(&ws.path(ADAPTER_MANIFEST));
    params.save(&store, &manifest)?;
    let csv = ws.output(&ws.path(ADAPTER_LOSS));
    report.write_csv(&csv)?;
    let last = report.last().expect("epoch 0 is always recorded");
    Ok(format!(
        "train-adapter: {} train pairs, final dev loss {:.6}, dev acc {:.4}",
        train.len(),
        last.dev_loss,
        last.dev_acc
    ))
}

pub fn train_head_cmd(ws: &mut Workspace) -> CmdResult {
    let res = Resources::load(ws, false)?;
    let split = load_split(ws)?;
    let sets = ws.candidates()?;
    let ctx = res.link();
    let train = nli_instances(&split.train, &sets, &ctx, true);
    let dev = nli_instances(&split.dev, &sets, &ctx, true);
    let init = NliHeadParams::init(ws.config.model.head_hidden, ws.config.seed);
    let (params, report) = train_nli_head(&train, &dev, init, &ws.config.train)?;
    let store = ws.output(&ws.path(HEAD));
    let manifest = ws.output(&ws.path(HEAD_MANIFEST));
    params.save(&store, &manifest)?;
    let csv = ws.output(&ws.path(HEAD_LOSS));
    report.write_csv(&csv)?;
    let last = report.last().expect("epoch 0 is always recorded");
    Ok(format!(
        "train-head: {} train instances, final dev loss {:.6}, dev acc {:.4}",
        train.len(),
        last.dev_loss,
        last.dev_acc
    ))
}

fn load_head(ws: &mut Workspace) -> Result<NliHeadParams, CliError> {
    let store = ws.input(&ws.path(HEAD))?;
    let manifest = ws.input(&ws.path(HEAD_MANIFEST))?;
    Ok(NliHeadParams::load(&store, &manifest)?)
}

fn load_adapter(ws: &mut Workspace) -> Result<Option<AdapterParams>, CliError> {
    if !ws.config.model.use_adapter || ws.config.paths.images.is_none() {
        return Ok(None);
    }
    let store = ws.input(&ws.path(ADAPTER))?;
    let manifest = ws.input(&ws.path(ADAPTER_MANIFEST))?;
    Ok(Some(AdapterParams::load(&store, &manifest)?))
}

fn reports(
    preds: &BTreeMap<String, Option<String>>,
    gold: &BTreeMap<String, String>,
    sets: &[CandidateSet],
) -> Result<(MicroF1Report, MicroF1Report), CliError> {
    let e2e = micro_f1(preds, gold, Setting::EndToEnd, None)?;
    let dis = micro_f1(preds, gold, Setting::Disambiguation, Some(sets))?;
    Ok((e2e, dis))
}

/// Predictions and gold restricted to the reviews that have both.
fn labelled(
    predictions: &[Prediction],
    gold: &BTreeMap<String, String>,
) -> (BTreeMap<String, Option<String>>, BTreeMap<String, String>) {
    let preds: BTreeMap<String, Option<String>> = prediction_map(predictions)
        .into_iter()
        .filter(|(id, _)| gold.contains_key(id))
        .collect();
    let gold = gold
        .iter()
        .filter(|(id, _)| preds.contains_key(*id))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    (preds, gold)
}

pub fn link(ws: &mut Workspace) -> CmdResult {
    let res = Resources::load(ws, false)?;
    let head = load_head(ws)?;
    let adapter = load_adapter(ws)?;
    let split = load_split(ws)?;
    let sets = ws.candidates()?;
    let name = ws.config.link.split.clone();
    let reviews: Vec<Review> = match name.as_str() {
        "train" => split.train,
        "dev" => split.dev,
        "test" => split.test,
        _ => {
            let mut all: Vec<Review> = split.train.into_iter().chain(split.dev).chain(split.test).collect();
            all.sort_by(|a, b| a.review_id.cmp(&b.review_id));
            all
        }
    };
    let model = Model {
        head: &head,
        adapter: adapter.as_ref(),
    };
    let predictions = predict_all(&reviews, &sets, &res.link(), model, &ws.config.fusion, true)?;
    let p = ws.output(&ws.path(PREDICTIONS));
    write_predictions(&predictions, &p)?;

    let (preds, gold) = labelled(&predictions, &gold_map(&reviews));
    let (e2e, dis) = reports(&preds, &gold, &sets)?;
    let wanted: Vec<CandidateSet> = sets.iter().filter(|s| gold.contains_key(&s.review_id)).cloned().collect();
    let mut entries = Map::new();
    entries.insert("split".into(), json!(name));
    entries.insert("end_to_end".into(), json!(e2e));
    entries.insert("disambiguation".into(), json!(dis));
    entries.insert("recall_at_k".into(), recall_map(&wanted, &gold, &ws.config.link.recall_ks)?);
    ws.update_metrics(entries)?;
    Ok(format!(
        "link: {} predictions on {name}; end_to_end F1 {:.4}, disambiguation F1 {:.4}",
        predictions.len(),
        e2e.f1,
        dis.f1
    ))
}

/// Which reports `eval` computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSetting {
    EndToEnd,
    Disambiguation,
    Both,
}

pub fn eval(ws: &mut Workspace, setting: EvalSetting) -> CmdResult {
    let p = ws.input(&ws.path(PREDICTIONS))?;
    let predictions = read_predictions(&p)?;
    let sets = ws.candidates()?;
    let gold = match ws.config.paths.gold.clone() {
        Some(g) => read_gold(&ws.input(&ws.path(g))?)?,
        None => gold_map(&ws.stage_reviews(FILTERED)?),
    };
    let (preds, gold) = labelled(&predictions, &gold);
    let mut entries = Map::new();
    if matches!(setting, EvalSetting::EndToEnd | EvalSetting::Both) {
        entries.insert("end_to_end".into(), json!(micro_f1(&preds, &gold, Setting::EndToEnd, None)?));
    }
    if matches!(setting, EvalSetting::Disambiguation | EvalSetting::Both) {
        entries.insert(
            "disambiguation".into(),
            json!(micro_f1(&preds, &gold, Setting::Disambiguation, Some(&sets))?),
        );
    }
    ws.write_json(EVAL, &entries)?;
    let summary = serde_json::to_string(&entries).expect("serializable");
    ws.update_metrics(entries)?;
    Ok(summary)
}

pub fn ablate(ws: &mut Workspace) -> CmdResult {
    let res = Resources::load(ws, false)?;
    let adapter = load_adapter(ws)?;
    let split = load_split(ws)?;
    let sets = ws.candidates()?;
    let ctx = res.link();
    let data = AblationData {
        ctx: &ctx,
        split: &split,
        candidates: &sets,
        adapter: adapter.as_ref(),
    };
    let config = AblationConfig {
        hidden: ws.config.model.head_hidden,
        train: ws.config.train.clone(),
        fusion: ws.config.fusion.clone(),
        lambda_grid: ws.config.ablation.lambda_grid.clone(),
    };
    let table = run_ablation(&data, &config)?;
    ws.write_json(ABLATION_JSON, &table)?;
    let text = table.to_text();
    let p = ws.output(&ws.path(ABLATION_TEXT));
    std::fs::write(&p, &text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    let mut entries = Map::new();
    entries.insert("ablation".into(), json!(table.rows));
    ws.update_metrics(entries)?;
    Ok(text.trim_end().to_string())
}

pub fn gridsearch(ws: &mut Workspace) -> CmdResult {
    let res = Resources::load(ws, true)?;
    let head = load_head(ws)?;
    let adapter = load_adapter(ws)?;
    let split = load_split(ws)?;
    let sets = ws.candidates()?;
    let dev = &split.dev;
    if dev.is_empty() {
        return Err(CliError::Data("gridsearch needs a non-empty dev split".into()));
    }
    let base_retrieval = ws.config.retrieval.clone();
    let base_fusion = ws.config.fusion.clone();
    let model = Model {
        head: &head,
        adapter: adapter.as_ref(),
    };
    let ctx = res.link();
    let gold = gold_map(dev);
    let result = grid_search(&ws.config.gridsearch.grid, |point| {
        let get = |k: &str, d: f64| point.get(k).copied().unwrap_or(d);
        let retrieval = RetrievalConfig {
            w_text: get("w_text", base_retrieval.w_text),
            w_cross: get("w_cross", base_retrieval.w_cross),
            w_image: get("w_image", base_retrieval.w_image),
            ..base_retrieval.clone()
        };
        let fusion = FusionConfig {
            lambda: get("lambda", base_fusion.lambda),
            ..base_fusion.clone()
        };
        let retrieved;
        let dev_sets: &[CandidateSet] = if retrieval == base_retrieval {
            &sets
        } else {
            retrieved = retrieve_all(dev, &res.retrieval(), &retrieval)?;
            &retrieved
        };
        let preds = predict_all(dev, dev_sets, &ctx, model, &fusion, true)?;
        Ok(micro_f1(&prediction_map(&preds), &gold, Setting::EndToEnd, None)?.f1)
    })?;
    ws.write_json(GRIDSEARCH, &result)?;
    Ok(format!(
        "gridsearch: {} points, best {} with dev end_to_end F1 {:.4}",
        result.table.len(),
        serde_json::to_string(&result.best).expect("serializable"),
        result.best_score
    ))
}
