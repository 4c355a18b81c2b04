//! Command-line front end. Every command exits 0 on success, 1 when its
//! inputs or configuration are invalid and 2 when the work itself fails.

mod config;
mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use clap::{ArgGroup, Args, Parser, Subcommand};
use thiserror::Error;

pub use config::{RunConfig, KEYS};
pub use manifest::{manifest_path, RunManifest, VERSION};

use crate::analysis::{attention_profile, encoder_from_checkpoint, AnalysisError};
use crate::corpus::augment::{augment, AugmentOptions, EchoTransport, HttpTransport, TranslationTransport};
use crate::corpus::{self, load_jsonl, read_json_lines, write_json_lines, CmiConfig, CorpusError, CorpusRecord};
use crate::model::{Checkpoint, CheckpointKind, CmlFormer, CouplingMode, ModelError};
use crate::objectives::{Objective, ObjectiveError};
use crate::tokenizer::{train_vocab, TokenizerError, Vocabulary};
use crate::trainer::{
    ablate_coupling, evaluate, finetune, load_labeled_jsonl, pretrain, OptimizerKind, PretrainOutputs, TrainError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn runtime(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::Objective(_) | TrainError::Data(_) => {
                CliError::Validation(e.to_string())
            }
            TrainError::Model(m) => m.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) | ModelError::Tensor(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Io(_) => CliError::Runtime(e.to_string()),
            AnalysisError::Model(m) => m.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cmlformer", version, about = "Code-mixed dual-decoder language model toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the shared subword vocabulary on a record corpus.
    TokenizerTrain(TokenizerTrainArgs),
    /// Validate records, derive switching points and attach CMI.
    Annotate(AnnotateArgs),
    /// Fill missing translations with an LLM endpoint or an offline mock.
    Augment(AugmentArgs),
    /// Multi-objective pre-training.
    Pretrain(PretrainArgs),
    /// Fine-tune a pre-trained encoder for binary classification.
    Finetune(FinetuneArgs),
    /// Precision, recall, accuracy and F1 of a classifier.
    Evaluate(EvaluateArgs),
    /// Export per-token attention scores from one encoder head.
    Attention(AttentionArgs),
    /// Pre-train once per coupling mode and compare.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct TrainingFlags {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for every random choice; overrides the config `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TokenizerTrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = crate::tokenizer::DEFAULT_VOCAB_SIZE)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 2)]
    pub min_freq: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// CMI weight on the mixing-language share.
    #[arg(long, default_value_t = 0.5)]
    pub wn: f64,
    /// CMI weight on the switching-point count.
    #[arg(long, default_value_t = 0.5)]
    pub wp: f64,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("backend").required(true).args(["endpoint", "mock"])))]
pub struct AugmentArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// HTTP endpoint accepting `{"prompt", "temperature", ...}` JSON.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Answer offline by echoing each sentence as its own translation.
    #[arg(long)]
    pub mock: bool,
    #[arg(long, default_value_t = crate::corpus::augment::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, default_value_t = crate::corpus::augment::DEFAULT_ATTEMPTS)]
    pub attempts: u32,
    #[arg(long, default_value_t = 2000)]
    pub retry_delay_ms: u64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub training: TrainingFlags,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated subset of mlm,spp,btsp,biltm,tlc,cmi.
    #[arg(long)]
    pub objectives: Option<String>,
    /// none, sync or async; overrides the config `coupling`.
    #[arg(long)]
    pub coupling: Option<String>,
    /// Existing vocabulary; trained from the data when omitted.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub training: TrainingFlags,
    /// Pre-training checkpoint.
    #[arg(long)]
    pub encoder: PathBuf,
    /// JSONL of `{"text", "label"}` objects.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Classifier checkpoint from `finetune`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub text: String,
    /// Per-word language bits, e.g. `0,0,1,1,0`.
    #[arg(long)]
    pub labels: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub training: TrainingFlags,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::TokenizerTrain(a) => tokenizer_train(a),
        Command::Annotate(a) => annotate(a),
        Command::Augment(a) => augment_cmd(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Attention(a) => attention_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("input {} does not exist", path.display())))
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::runtime(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::runtime(path, e))
}

fn record_texts(records: &[CorpusRecord]) -> Vec<&str> {
    records.iter().flat_map(|r| [r.cm_text.as_str(), r.base_text.as_str(), r.mix_text.as_str()]).collect()
}

fn resolve_config(flags: &TrainingFlags, defaults: RunConfig) -> Result<RunConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::load(path, defaults)?,
        None => defaults,
    };
    cfg.apply_overrides(&flags.overrides)?;
    if let Some(seed) = flags.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn load_vocab(path: Option<&Path>, records: &[CorpusRecord], cfg: &RunConfig) -> Result<Vocabulary, CliError> {
    match path {
        Some(p) => {
            require_file(p)?;
            Ok(Vocabulary::load(p)?)
        }
        None => Ok(train_vocab(record_texts(records), cfg.vocab_size, cfg.min_freq)?),
    }
}

/// Departures from the reference recipe (plain SGD, masks redrawn per
/// batch) worth flagging next to the results.
fn divergence_notes(cfg: &RunConfig) -> Vec<String> {
    let mut notes = Vec::new();
    if cfg.train.optimizer != OptimizerKind::Sgd {
        notes.push(format!("optimizer {} instead of sgd", cfg.train.optimizer));
    }
    if cfg.train.static_masks {
        notes.push("MLM masks drawn once and reused every epoch".into());
    }
    if cfg.train.clip_norm > 0.0 {
        notes.push(format!("gradient norm clipped at {}", cfg.train.clip_norm));
    }
    notes
}

fn tokenizer_train(a: TokenizerTrainArgs) -> Result<(), CliError> {
    require_file(&a.corpus)?;
    let rows = read_json_lines(&a.corpus)?;
    let texts: Vec<String> = rows
        .into_iter()
        .flat_map(|(_, r)| [Some(r.hinglish), r.english, r.hindi_roman])
        .flatten()
        .collect();
    let vocab = train_vocab(&texts, a.vocab_size, a.min_freq)?;
    vocab.save(&a.out).map_err(|e| CliError::runtime(&a.out, e))?;
    let mut m = RunManifest::new("tokenizer-train");
    m.config.insert("vocab_size".into(), a.vocab_size.to_string());
    m.config.insert("min_freq".into(), a.min_freq.to_string());
    m.input(&a.corpus);
    m.output(&a.out);
    m.write(&manifest_path(&a.out, false))?;
    println!("vocabulary of {} tokens written to {}", vocab.len(), a.out.display());
    Ok(())
}

fn annotate(a: AnnotateArgs) -> Result<(), CliError> {
    require_file(&a.input)?;
    let cfg = CmiConfig::new(a.wn, a.wp).map_err(|e| CliError::Validation(e.to_string()))?;
    let report = corpus::annotate(read_json_lines(&a.input)?, &cfg);
    write_json_lines(&a.out, &report.records)?;
    let mut m = RunManifest::new("annotate");
    m.config.insert("wn".into(), a.wn.to_string());
    m.config.insert("wp".into(), a.wp.to_string());
    m.input(&a.input);
    m.output(&a.out);
    for (line, issue) in &report.rejected {
        eprintln!("line {line} rejected: {issue}");
        m.notes.push(format!("line {line} rejected: {issue}"));
    }
    m.write(&manifest_path(&a.out, false))?;
    println!("{} records annotated, {} rejected", report.records.len(), report.rejected.len());
    Ok(())
}

fn augment_cmd(a: AugmentArgs) -> Result<(), CliError> {
    require_file(&a.input)?;
    if !(a.temperature.is_finite() && a.temperature >= 0.0) {
        return Err(CliError::Validation(format!("temperature {} must be >= 0", a.temperature)));
    }
    if a.attempts == 0 {
        return Err(CliError::Validation("attempts must be positive".into()));
    }
    let rows: Vec<_> = read_json_lines(&a.input)?.into_iter().map(|(_, r)| r).collect();
    let options = AugmentOptions {
        max_attempts: a.attempts,
        retry_delay: std::time::Duration::from_millis(a.retry_delay_ms),
        temperature: a.temperature,
    };
    let mut transport: Box<dyn TranslationTransport> = match &a.endpoint {
        Some(url) => Box::new(HttpTransport { endpoint: url.clone() }),
        None => Box::new(EchoTransport),
    };
    let report = augment(rows, transport.as_mut(), &options, &mut thread::sleep);
    write_json_lines(&a.out, &report.records)?;
    let mut m = RunManifest::new("augment");
    m.config.insert("backend".into(), a.endpoint.clone().unwrap_or_else(|| "mock".into()));
    m.config.insert("temperature".into(), a.temperature.to_string());
    m.config.insert("attempts".into(), a.attempts.to_string());
    m.input(&a.input);
    m.output(&a.out);
    for (index, reason) in &report.skipped {
        m.notes.push(format!("record {index} skipped: {reason:?}"));
    }
    m.write(&manifest_path(&a.out, false))?;
    println!(
        "{} records written, {} skipped, {} requests",
        report.records.len(),
        report.skipped.len(),
        report.requests
    );
    Ok(())
}

fn pretrain_cmd(a: PretrainArgs) -> Result<(), CliError> {
    require_file(&a.data)?;
    let mut cfg = resolve_config(&a.training, RunConfig::pretrain_defaults())?;
    if let Some(mode) = &a.coupling {
        cfg.model.coupling = mode.parse::<CouplingMode>()?;
    }
    if let Some(list) = &a.objectives {
        cfg.restrict_objectives(&Objective::parse_list(list)?)?;
    }
    let records = load_jsonl(&a.data)?;
    let vocab = load_vocab(a.vocab.as_deref(), &records, &cfg)?;
    cfg.model = cfg.model.clone().with_vocab(vocab.len());
    cfg.model.validate()?;
    cfg.train.validate()?;
    let model = CmlFormer::new(cfg.model.clone())?;

    create_dir(&a.out)?;
    let vocab_path = a.out.join("vocab.txt");
    vocab.save(&vocab_path).map_err(|e| CliError::runtime(&vocab_path, e))?;
    let outputs = PretrainOutputs { checkpoint: a.out.join("model.ckpt"), loss_csv: a.out.join("loss.csv") };
    let result = pretrain(&model, &vocab, &records, &cfg.train, None, Some(&outputs))?;

    let mut m = RunManifest::new("pretrain");
    m.seed = Some(cfg.train.seed);
    m.config = cfg.snapshot();
    m.config.insert("vocab_size".into(), vocab.len().to_string());
    m.config.insert("parameters".into(), model.parameter_breakdown().total.to_string());
    m.input(&a.data);
    for p in [&vocab_path, &outputs.checkpoint, &outputs.loss_csv] {
        m.output(p);
    }
    m.notes = divergence_notes(&cfg);
    m.write(&manifest_path(&a.out, true))?;
    if let Some(last) = result.log.epochs.last() {
        println!("epoch {}: total loss {:.6}", last.epoch, last.losses.total);
    }
    Ok(())
}

fn finetune_cmd(a: FinetuneArgs) -> Result<(), CliError> {
    require_file(&a.encoder)?;
    require_file(&a.data)?;
    let cfg = resolve_config(&a.training, RunConfig::finetune_defaults())?;
    let ignored = cfg.model_keys_set();
    if !ignored.is_empty() {
        log::warn!("model keys {ignored:?} ignored; the architecture comes from the checkpoint");
    }
    let pretrained = Checkpoint::load(&a.encoder)?;
    if pretrained.kind != CheckpointKind::Pretrained {
        return Err(CliError::Validation(format!("{} is not a pre-training checkpoint", a.encoder.display())));
    }
    let examples = load_labeled_jsonl(&a.data)?;
    let result = finetune(&pretrained, &examples, &cfg.train)?;
    let vocab = Vocabulary::from_tokens(pretrained.vocab.clone())?;
    let metrics = evaluate(&result.classifier, &result.params, &vocab, &examples)?;

    create_dir(&a.out)?;
    let ck_path = a.out.join("classifier.ckpt");
    result.checkpoint(&vocab).save(&ck_path)?;
    let loss_path = a.out.join("finetune_loss.csv");
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in result.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    write_file(&loss_path, csv)?;
    let metrics_path = a.out.join("train_metrics.json");
    write_file(&metrics_path, metrics.to_json())?;

    let mut m = RunManifest::new("finetune");
    m.seed = Some(cfg.train.seed);
    m.config = cfg.snapshot_of(&config::training_keys());
    m.input(&a.encoder);
    m.input(&a.data);
    for p in [&ck_path, &loss_path, &metrics_path] {
        m.output(p);
    }
    m.notes = divergence_notes(&cfg);
    m.write(&manifest_path(&a.out, true))?;
    println!("train {}", metrics.to_json().trim_end());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<(), CliError> {
    require_file(&a.model)?;
    require_file(&a.data)?;
    let ck = Checkpoint::load(&a.model)?;
    let classifier = ck.classifier_model()?;
    let vocab = Vocabulary::from_tokens(ck.vocab.clone())?;
    let examples = load_labeled_jsonl(&a.data)?;
    let metrics = evaluate(&classifier, &ck.params, &vocab, &examples)?;
    let json = metrics.to_json();
    print!("{json}");
    if let Some(out) = &a.out {
        write_file(out, &json)?;
        let mut m = RunManifest::new("evaluate");
        m.input(&a.model);
        m.input(&a.data);
        m.output(out);
        m.write(&manifest_path(out, false))?;
    }
    Ok(())
}

fn parse_labels(text: &str) -> Result<Vec<u8>, CliError> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(CliError::Validation(format!("label `{other}` is not 0 or 1"))),
        })
        .collect()
}

fn attention_cmd(a: AttentionArgs) -> Result<(), CliError> {
    require_file(&a.model)?;
    let labels = a.labels.as_deref().map(parse_labels).transpose()?;
    let ck = Checkpoint::load(&a.model)?;
    let (encoder, vocab) = encoder_from_checkpoint(&ck)?;
    let profile = attention_profile(&encoder, &ck.params, &vocab, &a.text, labels.as_deref(), a.layer, a.head)?;
    profile.save(&a.out).map_err(|e| CliError::runtime(&a.out, e))?;
    let mut m = RunManifest::new("attention");
    m.config.insert("layer".into(), a.layer.to_string());
    m.config.insert("head".into(), a.head.to_string());
    m.config.insert("text".into(), a.text.clone());
    m.input(&a.model);
    m.output(&a.out);
    m.write(&manifest_path(&a.out, false))?;
    println!("{} token scores written to {}", profile.tokens.len(), a.out.display());
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<(), CliError> {
    require_file(&a.data)?;
    let mut cfg = resolve_config(&a.training, RunConfig::pretrain_defaults())?;
    let records = load_jsonl(&a.data)?;
    let vocab = load_vocab(a.vocab.as_deref(), &records, &cfg)?;
    cfg.model = cfg.model.clone().with_vocab(vocab.len());
    cfg.model.validate()?;
    cfg.train.validate()?;
    create_dir(&a.out_dir)?;
    let vocab_path = a.out_dir.join("vocab.txt");
    vocab.save(&vocab_path).map_err(|e| CliError::runtime(&vocab_path, e))?;
    let report = ablate_coupling(&cfg.model, &vocab, &records, &cfg.train, &a.out_dir)?;

    let mut m = RunManifest::new("ablate");
    m.seed = Some(cfg.train.seed);
    m.config = cfg.snapshot();
    m.config.remove("coupling");
    m.config.insert("vocab_size".into(), vocab.len().to_string());
    m.input(&a.data);
    m.output(&vocab_path);
    for run in &report.runs {
        m.output(&run.loss_csv);
        m.output(&a.out_dir.join(format!("model_{}.ckpt", run.mode.short_name())));
    }
    m.output(&report.merged_csv);
    m.output(&report.summary_json);
    m.notes = divergence_notes(&cfg);
    m.write(&manifest_path(&a.out_dir, true))?;
    for run in &report.runs {
        let last = run.log.epochs.last().map_or(f64::NAN, |e| e.losses.total);
        println!("{:>5}: {} parameters, final total loss {last:.6}", run.mode.short_name(), run.parameters.total);
    }
    Ok(())
}
