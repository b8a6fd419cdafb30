//! Working-directory layout, artifact I/O and provenance records.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use attrlink::corpus::{load_kb, read_embeddings, EmbeddingStore, KnowledgeBase, Review};
use attrlink::jsonl;
use attrlink::mining::InformativenessFeatures;
use attrlink::retrieval::{read_candidates, CandidateSet};
use attrlink::textnorm::{PriorIndex, Stopwords};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{sha256_hex, RunConfig};
use crate::error::CliError;

pub const INGESTED: &str = "ingested.jsonl";
pub const REJECTED: &str = "rejected.jsonl";
pub const PRIORS: &str = "priors.jsonl";
pub const MENTIONS: &str = "mentions.jsonl";
pub const FILTERED: &str = "filtered.jsonl";
pub const SPLIT: &str = "split.json";
pub const CANDIDATES: &str = "candidates.jsonl";
pub const HEAD: &str = "head.amev";
pub const HEAD_MANIFEST: &str = "head.json";
pub const HEAD_LOSS: &str = "head_loss.csv";
pub const ADAPTER: &str = "adapter.amev";
pub const ADAPTER_MANIFEST: &str = "adapter.json";
pub const ADAPTER_LOSS: &str = "adapter_loss.csv";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const METRICS: &str = "metrics.json";
pub const EVAL: &str = "eval.json";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TEXT: &str = "ablation.txt";
pub const GRIDSEARCH: &str = "gridsearch.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooLong,
    NoMention,
    Uninformative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub review_id: String,
    pub reason: RejectReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<InformativenessFeatures>,
}

/// Review ids per split, each sorted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl SplitIds {
    pub fn part(&self, name: &str) -> Option<BTreeSet<&str>> {
        let ids: Box<dyn Iterator<Item = &String>> = match name {
            "train" => Box::new(self.train.iter()),
            "dev" => Box::new(self.dev.iter()),
            "test" => Box::new(self.test.iter()),
            "all" => Box::new(self.train.iter().chain(&self.dev).chain(&self.test)),
            _ => return None,
        };
        Some(ids.map(String::as_str).collect())
    }
}

/// One subcommand invocation: the resolved config, the working directory,
/// and every file read or written so far.
pub struct Workspace {
    pub root: PathBuf,
    pub config: RunConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeSet<String>,
}

impl Workspace {
    pub fn new(root: PathBuf, config: RunConfig) -> Result<Self, CliError> {
        std::fs::create_dir_all(&root)
            .map_err(|e| CliError::Data(format!("cannot create working directory {}: {e}", root.display())))?;
        Ok(Self {
            root,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeSet::new(),
        })
    }

    pub fn path(&self, p: impl AsRef<Path>) -> PathBuf {
        self.root.join(p)
    }

    fn label(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }

    /// Records the digest of an input. A missing file is a data error that
    /// names the path.
    pub fn input(&mut self, path: &Path) -> Result<PathBuf, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Data(format!("missing input {}: {e}", path.display())))?;
        self.inputs.insert(self.label(path), sha256_hex(&bytes));
        Ok(path.to_path_buf())
    }

    pub fn output(&mut self, path: &Path) -> PathBuf {
        self.outputs.insert(self.label(path));
        path.to_path_buf()
    }

    pub fn stopwords(&mut self) -> Result<Stopwords, CliError> {
        match self.config.paths.stopwords.clone() {
            Some(p) => {
                let p = self.input(&self.path(p))?;
                Ok(Stopwords::from_file(&p)?)
            }
            None => Ok(Stopwords::default()),
        }
    }

    pub fn kb(&mut self) -> Result<KnowledgeBase, CliError> {
        let p = self.input(&self.path(self.config.paths.kb.clone()))?;
        Ok(load_kb(&p)?)
    }

    pub fn images(&mut self) -> Result<Option<EmbeddingStore>, CliError> {
        match self.config.paths.images.clone() {
            Some(p) => {
                let p = self.input(&self.path(p))?;
                Ok(Some(read_embeddings(&p)?))
            }
            None => Ok(None),
        }
    }

    pub fn optional_store(&mut self, p: Option<PathBuf>) -> Result<Option<EmbeddingStore>, CliError> {
        match p {
            Some(p) => {
                let p = self.input(&self.path(p))?;
                Ok(Some(read_embeddings(&p)?))
            }
            None => Ok(None),
        }
    }

    /// Reviews from an earlier stage's file, in review-id order.
    pub fn stage_reviews(&mut self, name: &str) -> Result<Vec<Review>, CliError> {
        let p = self.input(&self.path(name))?;
        let mut reviews: Vec<Review> = jsonl::read(&p)?;
        sort_unique(&mut reviews, &p)?;
        Ok(reviews)
    }

    pub fn write_reviews(&mut self, name: &str, reviews: &[Review]) -> Result<(), CliError> {
        let p = self.output(&self.path(name));
        Ok(jsonl::write(&p, reviews)?)
    }

    pub fn priors(&mut self) -> Result<PriorIndex, CliError> {
        let p = self.input(&self.path(PRIORS))?;
        Ok(PriorIndex::read(&p)?)
    }

    pub fn candidates(&mut self) -> Result<Vec<CandidateSet>, CliError> {
        let p = self.input(&self.path(CANDIDATES))?;
        Ok(read_candidates(&p)?)
    }

    pub fn split(&mut self) -> Result<SplitIds, CliError> {
        let p = self.input(&self.path(SPLIT))?;
        read_json(&p)
    }

    /// Replaces the records for `reason` in `rejected.jsonl`, keeping the
    /// other stages' records.
    pub fn update_rejected(&mut self, reason: RejectReason, records: Vec<Rejected>) -> Result<(), CliError> {
        let p = self.path(REJECTED);
        let mut all: Vec<Rejected> = if p.exists() { jsonl::read(&p)? } else { Vec::new() };
        all.retain(|r| r.reason != reason);
        all.extend(records);
        all.sort_by(|a, b| a.review_id.cmp(&b.review_id).then(a.reason.cmp(&b.reason)));
        let p = self.output(&p);
        Ok(jsonl::write(&p, &all)?)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let p = self.output(&self.path(name));
        write_json(&p, value)
    }

    /// Sets `entries` in `metrics.json`. Entries written under a different
    /// config hash are discarded first.
    pub fn update_metrics(&mut self, entries: Map<String, Value>) -> Result<(), CliError> {
        let p = self.path(METRICS);
        let hash = Value::String(self.config.hash());
        let mut metrics: Map<String, Value> = match std::fs::read_to_string(&p) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => Map::new(),
        };
        if metrics.get("config_hash") != Some(&hash) {
            metrics.clear();
        }
        metrics.insert("config_hash".into(), hash);
        metrics.extend(entries);
        let p = self.output(&p);
        write_json(&p, &metrics)
    }

    /// Writes `runs/<subcommand>/run.json`.
    pub fn finish(self, subcommand: &str) -> Result<PathBuf, CliError> {
        let record = RunRecord {
            subcommand: subcommand.to_string(),
            config_hash: self.config.hash(),
            seed: self.config.seed,
            versions: [
                ("attrlink".to_string(), attrlink::VERSION.to_string()),
                ("attrlink-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
                ("embedding_store".to_string(), "AMEV1".to_string()),
            ]
            .into(),
            inputs: self.inputs,
            outputs: self.outputs.into_iter().collect(),
            config: self.config,
        };
        let dir = self.root.join("runs").join(subcommand);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        let p = dir.join("run.json");
        write_json(&p, &record)?;
        Ok(p)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub subcommand: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    /// Path → SHA-256 of the bytes read.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub config: RunConfig,
}

pub fn sort_unique(reviews: &mut [Review], source: &Path) -> Result<(), CliError> {
    reviews.sort_by(|a, b| a.review_id.cmp(&b.review_id));
    if let Some(w) = reviews.windows(2).find(|w| w[0].review_id == w[1].review_id) {
        return Err(CliError::Data(format!(
            "{}: duplicate review id `{}`",
            source.display(),
            w[0].review_id
        )));
    }
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
