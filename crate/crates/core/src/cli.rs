//! Subcommand front end over the whole pipeline.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 missing input file,
//! 4 vocabulary or checkpoint hash mismatch.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, RunConfig};
use crate::eval::{entropy_report, evaluate, EvalError};
use crate::ingest::{parse_audit_files, write_audit_csv, ClinicianStream, IngestError};
use crate::model::{
    generate_rows, init_model, load_checkpoint, save_checkpoint, Checkpoint, ModelError,
    ModelState, Strategy, DEFAULT_CONTRASTIVE_ALPHA, DEFAULT_CONTRASTIVE_K,
};
use crate::pipeline::{prepare_corpus, Partition, PipelineError, PreparedCorpus};
use crate::sessionize::{preprocess_streams, QuantizerSpec};
use crate::synth::{generate_logs, true_entropy_rate, EntropyMode, ProcessSpec, SynthError};
use crate::trainer::{train, write_loss_trace, TokenDataset, TrainError};
use crate::vocab::{decode_tokens, encode_session, fnv1a64, GlobalVocab, VocabError, BOS};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_FILE: i32 = 3;
pub const EXIT_HASH_MISMATCH: i32 = 4;

pub const MANIFEST: &str = "manifest.json";
const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("input file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        let model_mismatch = |e: &ModelError| matches!(e, ModelError::VocabMismatch { .. });
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::MissingFile(_) => EXIT_MISSING_FILE,
            CliError::Vocab(VocabError::HashMismatch { .. }) => EXIT_HASH_MISMATCH,
            CliError::Train(TrainError::VocabMismatch { .. }) => EXIT_HASH_MISMATCH,
            CliError::Model(e) | CliError::Train(TrainError::Model(e)) | CliError::Eval(EvalError::Model(e))
                if model_mismatch(e) =>
            {
                EXIT_HASH_MISMATCH
            }
            _ => EXIT_FAILURE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyKind {
    Greedy,
    Topk,
    Contrastive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartitionArg {
    Train,
    Val,
    Test,
}

impl From<PartitionArg> for Partition {
    fn from(p: PartitionArg) -> Self {
        match p {
            PartitionArg::Train => Partition::Train,
            PartitionArg::Val => Partition::Val,
            PartitionArg::Test => Partition::Test,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "auditlm", version, about = "Tabular language models for EHR audit logs")]
pub struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Model preset name.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Run on a single worker thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true, value_enum)]
    pub strategy: Option<StrategyKind>,
    /// Contrastive degeneration penalty.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Candidate count for top-k and contrastive decoding.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Top-k sampling temperature.
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Output directory (default: $AUDITLM_OUT_DIR, then ./auditlm-out).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate raw audit CSVs into sorted per-clinician streams.
    Ingest { inputs: Vec<PathBuf> },
    /// Sessionize, split clinicians, build the vocabulary and write the token dataset.
    Preprocess { inputs: Vec<PathBuf> },
    /// Build only the vocabulary from the training clinicians.
    Vocab { inputs: Vec<PathBuf> },
    /// Train a model on the training partition.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Perplexity, next-action accuracy and ROUGE-1 on a partition.
    Eval {
        #[arg(long, value_enum, default_value = "test")]
        partition: PartitionArg,
        #[arg(long)]
        no_rouge: bool,
    },
    /// Per-row entropy for raw audit logs.
    Score {
        inputs: Vec<PathBuf>,
        /// Sessions to print as tables.
        #[arg(long, default_value_t = 1)]
        show: usize,
    },
    /// Generate audit rows from the model.
    Sample {
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long)]
        rows: Option<usize>,
    },
    /// Generate a synthetic audit-log CSV from a Markov process.
    Synth {
        /// Process description (JSON); the reference workflow when omitted.
        #[arg(long)]
        process: Option<PathBuf>,
        #[arg(long)]
        clinicians: Option<usize>,
        #[arg(long)]
        events: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Preprocess { .. } => "preprocess",
            Command::Vocab { .. } => "vocab",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Score { .. } => "score",
            Command::Sample { .. } => "sample",
            Command::Synth { .. } => "synth",
        }
    }
}

/// Provenance stamped on every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Input path to FNV-1a 64 digest of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub seed: u64,
    pub bytes: u64,
    pub fnv1a64: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SplitFile {
    clinicians: Vec<String>,
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

impl SplitFile {
    fn indices(&self, p: Partition) -> Vec<u32> {
        let ids = match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        };
        let mut out: Vec<u32> = ids
            .iter()
            .filter_map(|id| self.clinicians.binary_search(id).ok())
            .map(|i| i as u32)
            .collect();
        out.sort_unstable();
        out
    }
}

fn digest(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

struct Run {
    config: RunConfig,
    command: &'static str,
    inputs: BTreeMap<String, String>,
    written: Vec<(String, ManifestEntry)>,
}

impl Run {
    fn header(&self) -> ArtifactHeader {
        ArtifactHeader {
            tool: "auditlm".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.into(),
            seed: self.config.seed,
            inputs: self.inputs.clone(),
            config: self.config.clone(),
        }
    }

    fn header_value(&self) -> serde_json::Value {
        serde_json::to_value(self.header()).expect("header serializes")
    }

    fn read_input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        if !path.is_file() {
            return Err(CliError::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.inputs.insert(path.display().to_string(), digest(&bytes));
        Ok(bytes)
    }

    fn write(&mut self, rel: &Path, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.config.resolve(rel);
        let io = |source| CliError::Io {
            path: path.clone(),
            source,
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        std::fs::write(&path, bytes).map_err(io)?;
        self.record(rel, bytes);
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    fn record(&mut self, rel: &Path, bytes: &[u8]) {
        self.written.push((
            rel.display().to_string(),
            ManifestEntry {
                command: self.command.into(),
                seed: self.config.seed,
                bytes: bytes.len() as u64,
                fnv1a64: digest(bytes),
            },
        ));
    }

    /// JSON object with the header under `header`.
    fn write_json<T: Serialize>(&mut self, rel: &Path, value: &T) -> Result<PathBuf, CliError> {
        let mut v = serde_json::to_value(value)?;
        if let serde_json::Value::Object(map) = &mut v {
            map.insert("header".into(), self.header_value());
        }
        let mut text = serde_json::to_string_pretty(&v)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// CSV body preceded by a `#` comment line holding the header.
    fn write_csv(&mut self, rel: &Path, body: &[u8]) -> Result<PathBuf, CliError> {
        let mut bytes = format!("# {}\n", serde_json::to_string(&self.header())?).into_bytes();
        bytes.extend_from_slice(body);
        self.write(rel, &bytes)
    }

    fn finish(self) -> Result<(), CliError> {
        let path = self.config.out_dir().join(MANIFEST);
        let mut manifest: Manifest = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(_) => Manifest::default(),
        };
        manifest.artifacts.extend(self.written);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|source| CliError::Io { path, source })
    }

    fn raw_inputs(&self, inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
        let paths = if inputs.is_empty() {
            self.config.paths.raw.clone()
        } else {
            inputs.to_vec()
        };
        if paths.is_empty() {
            return Err(CliError::Usage("no input CSV given (pass paths or set paths.raw)".into()));
        }
        Ok(paths)
    }

    fn streams(&mut self, inputs: &[PathBuf]) -> Result<Vec<ClinicianStream>, CliError> {
        let paths = self.raw_inputs(inputs)?;
        for p in &paths {
            self.read_input(p)?;
        }
        Ok(parse_audit_files(&paths)?)
    }

    fn corpus(&mut self, inputs: &[PathBuf]) -> Result<PreparedCorpus, CliError> {
        let streams = self.streams(inputs)?;
        let mut preprocess = self.config.preprocess.clone();
        preprocess.max_rows = preprocess.max_rows.min(self.context_len().saturating_sub(1) / 3).max(1);
        Ok(prepare_corpus(&streams, &preprocess, &self.config.split)?)
    }

    fn context_len(&self) -> usize {
        self.config
            .model
            .explicit
            .as_ref()
            .map_or(self.config.model.context_len, |c| c.context_len)
    }

    fn vocab(&mut self) -> Result<GlobalVocab, CliError> {
        let path = self.config.resolve(&self.config.paths.vocab.clone());
        let bytes = self.read_input(&path)?;
        Ok(GlobalVocab::from_json(&String::from_utf8_lossy(&bytes))?)
    }

    fn checkpoint(&mut self, vocab: &GlobalVocab) -> Result<Checkpoint, CliError> {
        let path = self.config.resolve(&self.config.paths.checkpoint.clone());
        let bytes = self.read_input(&path)?;
        Ok(load_checkpoint(bytes.as_slice(), Some(vocab.hash()))?)
    }

    fn dataset(&mut self, vocab: &GlobalVocab) -> Result<(TokenDataset, SplitFile), CliError> {
        let path = self.config.resolve(&self.config.paths.dataset.clone());
        let bytes = self.read_input(&path)?;
        let dataset = TokenDataset::read(bytes.as_slice())?;
        if dataset.vocab_hash != vocab.hash() {
            return Err(TrainError::VocabMismatch {
                dataset: dataset.vocab_hash,
                expected: vocab.hash(),
            }
            .into());
        }
        let split_path = self.config.resolve(&self.config.paths.split.clone());
        let split = serde_json::from_slice(&self.read_input(&split_path)?)?;
        Ok((dataset, split))
    }
}

/// Applies the decoding flags on top of the configured strategy.
pub fn resolve_strategy(
    base: Strategy,
    kind: Option<StrategyKind>,
    k: Option<usize>,
    alpha: Option<f64>,
    temperature: Option<f64>,
) -> Result<Strategy, CliError> {
    let kind = kind.unwrap_or(match base {
        Strategy::Greedy => StrategyKind::Greedy,
        Strategy::TopK { .. } => StrategyKind::Topk,
        Strategy::Contrastive { .. } => StrategyKind::Contrastive,
    });
    let usage = |m: &str| Err(CliError::Usage(m.into()));
    let strategy = match kind {
        StrategyKind::Greedy => {
            if k.is_some() || alpha.is_some() || temperature.is_some() {
                return usage("--k, --alpha and --temperature do not apply to greedy decoding");
            }
            Strategy::Greedy
        }
        StrategyKind::Topk => {
            if alpha.is_some() {
                return usage("--alpha applies only to contrastive decoding");
            }
            let (bk, bt) = match base {
                Strategy::TopK { k, temperature } => (k, temperature),
                _ => (DEFAULT_TOP_K, 1.0),
            };
            Strategy::TopK {
                k: k.unwrap_or(bk),
                temperature: temperature.unwrap_or(bt),
            }
        }
        StrategyKind::Contrastive => {
            if temperature.is_some() {
                return usage("--temperature applies only to top-k sampling");
            }
            let (bk, ba) = match base {
                Strategy::Contrastive { k, alpha } => (k, alpha),
                _ => (DEFAULT_CONTRASTIVE_K, DEFAULT_CONTRASTIVE_ALPHA),
            };
            Strategy::Contrastive {
                k: k.unwrap_or(bk),
                alpha: alpha.unwrap_or(ba),
            }
        }
    };
    match strategy {
        Strategy::TopK { k: 0, .. } | Strategy::Contrastive { k: 0, .. } => usage("--k must be at least 1"),
        Strategy::TopK { temperature, .. } if !(temperature > 0.0) => usage("--temperature must be positive"),
        Strategy::Contrastive { alpha, .. } if !(0.0..=1.0).contains(&alpha) => usage("--alpha must lie in [0, 1]"),
        s => Ok(s),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) if !path.is_file() => return Err(CliError::MissingFile(path.clone())),
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(preset) = &cli.preset {
        config.model.preset = preset.clone();
        config.model.explicit = None;
    }
    if cli.deterministic {
        config.deterministic = true;
    }
    if let Some(dir) = &cli.out_dir {
        config.paths.out_dir = Some(dir.clone());
    }
    config.eval.strategy = resolve_strategy(config.eval.strategy, cli.strategy, cli.k, cli.alpha, cli.temperature)?;
    Ok(config.with_derived_seeds())
}

/// Parses `args` (program name first), runs the subcommand, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(cli)?;
    if config.deterministic {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
        pool.install(|| dispatch(cli, config))
    } else {
        dispatch(cli, config)
    }
}

fn dispatch(cli: &Cli, config: RunConfig) -> Result<(), CliError> {
    let mut run = Run {
        config,
        command: cli.command.name(),
        inputs: BTreeMap::new(),
        written: Vec::new(),
    };
    match &cli.command {
        Command::Ingest { inputs } => ingest(&mut run, inputs)?,
        Command::Preprocess { inputs } => preprocess(&mut run, inputs)?,
        Command::Vocab { inputs } => vocab(&mut run, inputs)?,
        Command::Train { epochs } => train_cmd(&mut run, *epochs)?,
        Command::Eval { partition, no_rouge } => eval_cmd(&mut run, (*partition).into(), !no_rouge)?,
        Command::Score { inputs, show } => score(&mut run, inputs, *show)?,
        Command::Sample { sessions, rows } => sample(&mut run, *sessions, *rows)?,
        Command::Synth {
            process,
            clinicians,
            events,
        } => synth(&mut run, process.as_deref(), *clinicians, *events)?,
    }
    run.finish()
}

#[derive(Serialize)]
struct StreamSummary<'a> {
    user_id: &'a str,
    events: usize,
    first_access: Option<i64>,
    last_access: Option<i64>,
}

fn ingest(run: &mut Run, inputs: &[PathBuf]) -> Result<(), CliError> {
    let streams = run.streams(inputs)?;
    let mut csv = Vec::new();
    write_audit_csv(&mut csv, &streams)?;
    run.write_csv(Path::new("events.csv"), &csv)?;
    let summary: Vec<StreamSummary> = streams
        .iter()
        .map(|s| StreamSummary {
            user_id: &s.user_id,
            events: s.len(),
            first_access: s.events.first().map(|e| e.access_time),
            last_access: s.events.last().map(|e| e.access_time),
        })
        .collect();
    let events: usize = streams.iter().map(|s| s.len()).sum();
    run.write_json(
        Path::new("ingest.json"),
        &serde_json::json!({ "clinicians": summary, "events": events }),
    )?;
    println!("{} clinicians, {events} events", streams.len());
    Ok(())
}

fn write_vocab(run: &mut Run, vocab: &GlobalVocab) -> Result<(), CliError> {
    let value: serde_json::Value = serde_json::from_str(&vocab.to_json())?;
    let rel = run.config.paths.vocab.clone();
    run.write_json(&rel, &value)?;
    Ok(())
}

fn preprocess(run: &mut Run, inputs: &[PathBuf]) -> Result<(), CliError> {
    let corpus = run.corpus(inputs)?;
    write_vocab(run, &corpus.vocab)?;
    let dataset = corpus.dataset();
    let mut bytes = Vec::new();
    dataset.write(&mut bytes)?;
    let rel = run.config.paths.dataset.clone();
    run.write(&rel, &bytes)?;
    let counts = |p| corpus.partition(p).len();
    let sidecar = serde_json::json!({
        "vocab_hash": format!("{:016x}", dataset.vocab_hash),
        "sequences": dataset.sequences.len(),
        "partitions": {
            "train": counts(Partition::Train),
            "val": counts(Partition::Val),
            "test": counts(Partition::Test),
        },
    });
    run.write_json(&PathBuf::from(format!("{}.json", rel.display())), &sidecar)?;
    let split = SplitFile {
        clinicians: corpus.clinicians.clone(),
        train: corpus.split.train.clone(),
        val: corpus.split.val.clone(),
        test: corpus.split.test.clone(),
    };
    let rel = run.config.paths.split.clone();
    run.write_json(&rel, &split)?;
    println!(
        "{} tokens in vocab; {} / {} / {} sequences (train / val / test)",
        corpus.vocab.len(),
        counts(Partition::Train),
        counts(Partition::Val),
        counts(Partition::Test)
    );
    Ok(())
}

fn vocab(run: &mut Run, inputs: &[PathBuf]) -> Result<(), CliError> {
    let corpus = run.corpus(inputs)?;
    write_vocab(run, &corpus.vocab)?;
    println!(
        "{} tokens ({} metric names), hash {:016x}",
        corpus.vocab.len(),
        corpus.vocab.metric_names().len(),
        corpus.vocab.hash()
    );
    Ok(())
}

fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>, CliError> {
    let mut bytes = Vec::new();
    save_checkpoint(ckpt, &mut bytes)?;
    Ok(bytes)
}

fn train_cmd(run: &mut Run, epochs: Option<usize>) -> Result<(), CliError> {
    let reports = run.config.paths.reports.clone();
    if let Some(e) = epochs {
        run.config.train.epochs = e;
    }
    let vocab = run.vocab()?;
    let (dataset, split) = run.dataset(&vocab)?;
    let train_set = dataset.subset(&split.indices(Partition::Train));
    let val_set = dataset.subset(&split.indices(Partition::Val));
    let model_seed = run.config.seed_for("model");
    let model_config = run.config.model.resolve(vocab.len(), model_seed)?;
    let mut state: ModelState = init_model(&model_config, model_seed)?;
    state.bind_vocab(&vocab)?;
    log::info!(
        "training {} parameters on {} sequences for {} epochs",
        state.num_parameters(),
        train_set.len(),
        run.config.train.epochs
    );
    let mut train_config = run.config.train.clone();
    let ckpt_rel = run.config.paths.checkpoint_dir.clone();
    train_config.checkpoint_dir = Some(run.config.resolve(&ckpt_rel));
    train_config.checkpoint_header = Some(run.header_value());
    let outcome = train(state, &train_set, &val_set, &train_config)?;

    for e in &outcome.epochs {
        if let Some(path) = &e.checkpoint {
            let bytes = std::fs::read(path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            let name = path.file_name().map(PathBuf::from).unwrap_or_default();
            run.record(&ckpt_rel.join(name), &bytes);
        }
    }
    let mut ckpt = Checkpoint::new(outcome.state);
    ckpt.optimizer = outcome.optimizer.to_tensors();
    ckpt.meta = serde_json::json!({ "header": run.header_value(), "epochs": outcome.epochs });
    let rel = run.config.paths.checkpoint.clone();
    run.write(&rel, &checkpoint_bytes(&ckpt)?)?;
    let mut trace = Vec::new();
    write_loss_trace(&outcome.trace, &mut trace)?;
    run.write_csv(&reports.join("loss_trace.csv"), &trace)?;
    run.write_json(&reports.join("train.json"),
        &serde_json::json!({ "steps": outcome.trace.len(), "epochs": outcome.epochs }),
    )?;
    if let Some(last) = outcome.epochs.last() {
        println!(
            "{} steps; final train loss {:.4}, val loss {}",
            outcome.trace.len(),
            last.train_loss,
            last.val_loss.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn eval_cmd(run: &mut Run, partition: Partition, with_rouge: bool) -> Result<(), CliError> {
    let reports = run.config.paths.reports.clone();
    let vocab = run.vocab()?;
    let state = run.checkpoint(&vocab)?.state;
    let (dataset, split) = run.dataset(&vocab)?;
    let mut sequences = dataset.subset(&split.indices(partition));
    if let Some(n) = run.config.eval.max_sequences {
        sequences.truncate(n);
    }
    let report = evaluate(
        &state,
        &sequences,
        &run.config.eval.strategy,
        run.config.seed_for("eval"),
        with_rouge && run.config.eval.rouge,
    )?;
    run.write_json(&reports.join("eval.json"), &report)?;
    let p = &report.perplexity;
    let a = &report.accuracy;
    println!(
        "perplexity MN {:.4} PID {:.4} AT {:.4}; accuracy MN {:.4} PID {:.4} AT {:.4} All {:.4}",
        p.metric_name, p.pat_id, p.at_bin, a.metric_name, a.pat_id, a.at_bin, a.all
    );
    if let Some(r) = &report.rouge {
        println!("ROUGE-1 F1 MN {:.4} PID {:.4} AT {:.4} All {:.4}", r.metric_name.f1, r.pat_id.f1, r.at_bin.f1, r.all.f1);
    }
    Ok(())
}

fn score(run: &mut Run, inputs: &[PathBuf], show: usize) -> Result<(), CliError> {
    let reports = run.config.paths.reports.clone();
    let vocab = run.vocab()?;
    let state = run.checkpoint(&vocab)?.state;
    let streams = run.streams(inputs)?;
    let mut preprocess = run.config.preprocess.clone();
    preprocess.max_rows = preprocess.max_rows.min(state.config.max_rows());
    let sessions: Vec<_> = preprocess_streams(&streams, &preprocess)
        .iter()
        .map(|s| encode_session(s, &vocab))
        .collect();
    let quantizer = QuantizerSpec::logarithmic(preprocess.quantizer_max_s);
    let report = entropy_report(&state, &vocab, &quantizer, &sessions)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    run.write_csv(&reports.join("entropy.csv"), &csv)?;
    let shown = crate::eval::EntropyReport {
        sessions: report.sessions.iter().take(show).cloned().collect(),
    };
    print!("{}", shown.render_table());
    Ok(())
}

fn sample(run: &mut Run, sessions: Option<usize>, rows: Option<usize>) -> Result<(), CliError> {
    let reports = run.config.paths.reports.clone();
    let vocab = run.vocab()?;
    let state = run.checkpoint(&vocab)?.state;
    let sessions = sessions.unwrap_or(run.config.sample.sessions);
    let rows = rows.unwrap_or(run.config.sample.rows);
    let quantizer = QuantizerSpec::logarithmic(run.config.preprocess.quantizer_max_s);
    let strategy = run.config.eval.strategy;
    let base = run.config.seed_for("sample");
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Io {
        path: "samples.csv".into(),
        source: std::io::Error::other(e),
    };
    w.write_record(["sample", "row", "METRIC_NAME", "PAT_INDEX", "AT"]).map_err(csv_err)?;
    for i in 0..sessions {
        let mut rng = ChaCha8Rng::seed_from_u64(base.wrapping_add(i as u64));
        let tokens = generate_rows(&state, &[BOS], rows, &strategy, &mut rng)?;
        let session = decode_tokens(&tokens, &vocab)?;
        for (r, row) in session.rows.iter().enumerate() {
            w.write_record([
                i.to_string(),
                r.to_string(),
                row.metric_name.clone(),
                row.patient.to_string(),
                quantizer.label(row.delta_bin),
            ])
            .map_err(csv_err)?;
        }
    }
    let body = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
    let path = run.write_csv(&reports.join("samples.csv"), &body)?;
    println!("{sessions} sessions of {rows} rows -> {}", path.display());
    Ok(())
}

fn synth(
    run: &mut Run,
    process: Option<&Path>,
    clinicians: Option<usize>,
    events: Option<usize>,
) -> Result<(), CliError> {
    if let Some(p) = process {
        run.config.synth.process = Some(p.to_path_buf());
    }
    if let Some(n) = clinicians {
        run.config.synth.clinicians = n;
    }
    if let Some(n) = events {
        run.config.synth.events_per_clinician = n;
    }
    let spec = match run.config.synth.process.clone() {
        Some(path) => ProcessSpec::from_json(&String::from_utf8_lossy(&run.read_input(&path)?))?,
        None => ProcessSpec::reference_workflow(),
    };
    let logs = generate_logs(
        &spec,
        run.config.synth.clinicians,
        run.config.synth.events_per_clinician,
        run.config.seed_for("synth"),
    )?;
    run.write_csv(Path::new("synth.csv"), logs.to_csv()?.as_bytes())?;
    let entropy_rate = true_entropy_rate(&spec, EntropyMode::Stationary)?;
    let process: serde_json::Value = serde_json::from_str(&spec.to_json())?;
    run.write_json(
        Path::new("synth.json"),
        &serde_json::json!({
            "process": process,
            "entropy_rate_nats": entropy_rate,
            "events": logs.events,
            "sessions": logs.sessions,
            "shifts": logs.shifts,
        }),
    )?;
    println!(
        "{} events, {} sessions, {} shifts; metric entropy rate {entropy_rate:.4} nats",
        logs.events, logs.sessions, logs.shifts
    );
    Ok(())
}
