//! Run configuration: a JSON file mirroring [`RunConfig`], overridden by
//! dotted `key=value` assignments from the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use attrlink::disambig::{FusionConfig, NliHeadParams};
use attrlink::evalbench::{SynthConfig, DEFAULT_RATIOS};
use attrlink::mining::FilterThresholds;
use attrlink::optim::TrainConfig;
use attrlink::retrieval::RetrievalConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Input locations. Relative paths resolve against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub kb: PathBuf,
    pub reviews: PathBuf,
    pub images: Option<PathBuf>,
    /// `gold.jsonl`; when absent, gold comes from the reviews themselves.
    pub gold: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub entity_text_embeddings: Option<PathBuf>,
    pub review_text_embeddings: Option<PathBuf>,
    pub cross_scores: Option<PathBuf>,
    pub entailment_scores: Option<PathBuf>,
    /// Where `synth` writes its corpus.
    pub synth_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            kb: "synth/entities.jsonl".into(),
            reviews: "synth/reviews.jsonl".into(),
            images: Some("synth/images.amev".into()),
            gold: None,
            stopwords: None,
            entity_text_embeddings: None,
            review_text_embeddings: None,
            cross_scores: None,
            entailment_scores: None,
            synth_dir: "synth".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEmbedderConfig {
    pub dim: usize,
    pub seed: u64,
}

impl Default for TextEmbedderConfig {
    fn default() -> Self {
        Self { dim: 256, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let (train, dev, test) = DEFAULT_RATIOS;
        Self { train, dev, test }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub head_hidden: usize,
    pub adapter_hidden: usize,
    /// Score images through the trained adapter; off scores raw cosines.
    pub use_adapter: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            head_hidden: NliHeadParams::DEFAULT_HIDDEN,
            adapter_hidden: 64,
            use_adapter: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    /// Which split `link` predicts: train, dev, test or all.
    pub split: String,
    pub recall_ks: Vec<usize>,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            recall_ks: vec![1, 5, 10],
        }
    }
}

fn lambda_steps() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Parameter name → values. Names: lambda, w_text, w_cross, w_image.
    pub grid: BTreeMap<String, Vec<f64>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            grid: [("lambda".to_string(), lambda_steps())].into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub lambda_grid: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            lambda_grid: lambda_steps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// The only seed; copied into `synth.seed` and `train.seed`.
    pub seed: u64,
    pub max_tokens: usize,
    /// Score for pairs missing from a score table.
    pub score_default: f64,
    pub paths: Paths,
    pub text_embedder: TextEmbedderConfig,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub filter: FilterThresholds,
    pub retrieval: RetrievalConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub link: LinkConfig,
    pub gridsearch: GridConfig,
    pub ablation: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            max_tokens: 500,
            score_default: 0.0,
            paths: Paths::default(),
            text_embedder: TextEmbedderConfig::default(),
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            filter: FilterThresholds::default(),
            retrieval: RetrievalConfig::default(),
            fusion: FusionConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            link: LinkConfig::default(),
            gridsearch: GridConfig::default(),
            ablation: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file. A `run.json` is accepted too; its recorded
    /// config is used.
    pub fn from_file(path: &Path) -> Result<Value, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        if value.get("config_hash").is_some() {
            if let Some(inner) = value.get_mut("config").map(Value::take) {
                value = inner;
            }
        }
        if !value.is_object() {
            return Err(CliError::Usage(format!("config {} must be a JSON object", path.display())));
        }
        Ok(value)
    }

    /// Defaults, then the file, then each override in order.
    pub fn resolve(file: Option<Value>, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("config serializes");
        if let Some(file) = file {
            check_known(&value, &file, "")?;
            merge(&mut value, file);
        }
        for (key, v) in overrides {
            set_path(&mut value, key, v.clone())?;
        }
        let mut config: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        if config.synth.seed != config.seed || config.train.seed != config.seed {
            log::debug!("nested seeds replaced by seed={}", config.seed);
        }
        config.synth.seed = config.seed;
        config.train.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate()?;
        self.retrieval.validate()?;
        self.fusion.validate()?;
        self.train.validate()?;
        if self.max_tokens == 0 {
            return Err(CliError::Usage("max_tokens must be positive".into()));
        }
        if self.model.head_hidden == 0 || self.model.adapter_hidden == 0 {
            return Err(CliError::Usage("hidden sizes must be positive".into()));
        }
        if !["train", "dev", "test", "all"].contains(&self.link.split.as_str()) {
            return Err(CliError::Usage(format!(
                "link.split must be train, dev, test or all, got `{}`",
                self.link.split
            )));
        }
        for key in self.gridsearch.grid.keys() {
            if !GRID_KEYS.contains(&key.as_str()) {
                return Err(CliError::Usage(format!(
                    "unknown grid parameter `{key}`; expected one of {GRID_KEYS:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn split_ratios(&self) -> (f64, f64, f64) {
        (self.split.train, self.split.dev, self.split.test)
    }

    /// SHA-256 of the compact JSON encoding, lowercase hex.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

pub const GRID_KEYS: [&str; 4] = ["lambda", "w_text", "w_cross", "w_image"];

/// Every key in `file` must name a field of the defaults, except inside
/// the open grid map.
fn check_known(defaults: &Value, file: &Value, prefix: &str) -> Result<(), CliError> {
    let (Value::Object(d), Value::Object(f)) = (defaults, file) else {
        return Ok(());
    };
    if prefix == "gridsearch.grid" {
        return Ok(());
    }
    for (k, v) in f {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match d.get(k) {
            Some(dv) => check_known(dv, v, &path)?,
            None => return Err(CliError::Usage(format!("unknown config key `{path}`"))),
        }
    }
    Ok(())
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(CliError::Usage(format!("`{key}`: `{}` is not a section", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            // maps such as the grid accept new keys; struct fields must exist
            let open = parts.first() == Some(&"gridsearch") && i == 2;
            if !open && !map.contains_key(*part) {
                return Err(CliError::Usage(format!("unknown config key `{key}`")));
            }
            map.insert(part.to_string(), v);
            return Ok(());
        }
        node = map
            .get_mut(*part)
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
    }
    Err(CliError::Usage("empty config key".into()))
}

/// Parses `key=value`; the value is JSON when it parses as JSON, otherwise
/// a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    if k.is_empty() {
        return Err(format!("empty key in `{s}`"));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
