//! The `attrlink` command line: one subcommand per pipeline stage, all
//! sharing a JSON config, a working directory and a single seed.

pub mod commands;
pub mod config;
pub mod error;
pub mod workspace;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::commands::EvalSetting;
use crate::config::{parse_assignment, RunConfig};
use crate::error::CliError;
use crate::workspace::Workspace;

#[derive(Debug, Parser)]
#[command(name = "attrlink", version, about = "Attribute-aware multimodal entity linking")]
pub struct Cli {
    /// JSON config file (a run.json is accepted too).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Working directory holding every stage's artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    pub workdir: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-review stages.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: Option<u64>,
    /// Config override, e.g. `--set fusion.lambda=0.3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_assignment)]
    pub overrides: Vec<(String, Value)>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the knowledge base and reviews; drop over-long reviews.
    Ingest,
    /// Build the mention prior index from the knowledge base.
    Priors,
    /// Detect mentions and extract attribute values.
    Mentions,
    /// Drop uninformative reviews and split the rest.
    Filter,
    /// Retrieve candidate entities for every review.
    Retrieve,
    /// Train the image adapter with in-batch negatives.
    TrainAdapter(TrainArgs),
    /// Train the text scoring head.
    TrainHead(TrainArgs),
    /// Predict entities for a split and report metrics.
    Link {
        /// train, dev, test or all.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Score predictions against gold.
    Eval {
        #[arg(long, value_enum, default_value = "both")]
        setting: EvalSetting,
    },
    /// Run the variant ablation.
    Ablate,
    /// Generate a synthetic corpus.
    Synth {
        /// Output directory, relative to the working directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tune fusion parameters on the dev split.
    Gridsearch {
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Priors => "priors",
            Command::Mentions => "mentions",
            Command::Filter => "filter",
            Command::Retrieve => "retrieve",
            Command::TrainAdapter(_) => "train-adapter",
            Command::TrainHead(_) => "train-head",
            Command::Link { .. } => "link",
            Command::Eval { .. } => "eval",
            Command::Ablate => "ablate",
            Command::Synth { .. } => "synth",
            Command::Gridsearch { .. } => "gridsearch",
        }
    }

    /// Subcommand flags as config overrides.
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        match self {
            Command::TrainAdapter(a) | Command::TrainHead(a) => {
                if let Some(v) = a.epochs {
                    out.push(("train.epochs".into(), json!(v)));
                }
                if let Some(v) = a.learning_rate {
                    out.push(("train.learning_rate".into(), json!(v)));
                }
                if let Some(v) = a.batch_size {
                    out.push(("train.batch_size".into(), json!(v)));
                }
            }
            Command::Link { split, lambda } => {
                if let Some(v) = split {
                    out.push(("link.split".into(), json!(v)));
                }
                if let Some(v) = lambda {
                    out.push(("fusion.lambda".into(), json!(v)));
                }
            }
            Command::Synth { out: Some(dir) } => out.push(("paths.synth_dir".into(), json!(dir))),
            Command::Gridsearch { lambda: Some(v) } => out.push(("gridsearch.grid.lambda".into(), json!(v))),
            _ => {}
        }
        out
    }
}

fn execute(cli: Cli) -> Result<String, CliError> {
    let file = cli.config.as_deref().map(RunConfig::from_file).transpose()?;
    let mut overrides = Vec::new();
    if let Some(seed) = cli.seed {
        overrides.push(("seed".to_string(), json!(seed)));
    }
    overrides.extend(cli.command.overrides());
    overrides.extend(cli.overrides);
    let config = RunConfig::resolve(file, &overrides)?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        pool = pool.num_threads(n as usize);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} worker threads: {e}", cli.jobs.unwrap_or(0))))?;

    let mut ws = Workspace::new(cli.workdir, config)?;
    let name = cli.command.name();
    let summary = pool.install(|| match &cli.command {
        Command::Ingest => commands::ingest(&mut ws),
        Command::Priors => commands::priors(&mut ws),
        Command::Mentions => commands::mentions(&mut ws),
        Command::Filter => commands::filter(&mut ws),
        Command::Retrieve => commands::retrieve(&mut ws),
        Command::TrainAdapter(_) => commands::train_adapter_cmd(&mut ws),
        Command::TrainHead(_) => commands::train_head_cmd(&mut ws),
        Command::Link { .. } => commands::link(&mut ws),
        Command::Eval { setting } => commands::eval(&mut ws, *setting),
        Command::Ablate => commands::ablate(&mut ws),
        Command::Synth { .. } => commands::synth(&mut ws),
        Command::Gridsearch { .. } => commands::gridsearch(&mut ws),
    })?;
    let record = ws.finish(name)?;
    log::info!("{name}: provenance in {}", record.display());
    Ok(summary)
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code: 0 ok, 1 usage error, 2 data error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
