//! `clinevent` subcommands. [`dispatch`] returns the process exit code:
//! 0 on success, 1 for bad input (arguments, files, data), 2 for internal
//! failures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use thiserror::Error;

use clinevent::corpus::{read_corpus_dir, write_corpus_dir, AnnotatedDocument, NoteType};
use clinevent::encoder::{load_embedding_file, EmbeddingTable};
use clinevent::prediction::{build_feature_matrix, compare_feature_sets, load_timelines, PredictionConfig};
use clinevent::schema::{
    build_symptom_vocabulary, filter_symptoms, load_schema, truncate_covid_triggers, validate_event, NormalizationMap,
    Schema,
};
use clinevent::scoring::{agreement_report, score_documents_with, ScoreOptions, ScoreReport, TriggerMatchMode};
use clinevent::spanmodel::{train, DevSet, ModelConfig, SpanModel, SpanModelError, TrainReport};
use clinevent::synthetic::{make_synthetic_corpus, SyntheticSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0:#}")]
    Input(anyhow::Error),
    #[error("internal error: {0:#}")]
    Internal(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

trait InputContext<T> {
    fn input(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> InputContext<T> for Result<T, E> {
    fn input(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Input(e.into()))
    }
}

fn input_error(message: impl Into<String>) -> CliError {
    CliError::Input(anyhow::anyhow!(message.into()))
}

/// Bad data and configuration is an input error; a diverging run is not.
fn model_error(e: SpanModelError) -> CliError {
    match e {
        SpanModelError::NonFiniteLoss { .. } | SpanModelError::NonFiniteScore | SpanModelError::Encoder(_) => {
            CliError::Internal(e.into())
        }
        _ => CliError::Input(e.into()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "clinevent", version, about = "Clinical event extraction, scoring and outcome prediction")]
struct Cli {
    /// Annotation schema config (JSON); the built-in COVID/Symptom scheme when absent.
    #[arg(long, global = true)]
    schema: Option<PathBuf>,
    /// Subcommand config (JSON): model config for train, prediction config for
    /// predict, generator spec for synth.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides any seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Trigger equivalence for scoring.
    #[arg(long, global = true, default_value = "exact", value_parser = parse_mode)]
    mode: TriggerMatchMode,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

fn parse_mode(s: &str) -> Result<TriggerMatchMode, String> {
    s.parse()
}

fn parse_note_type(s: &str) -> Result<NoteType, String> {
    s.parse()
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a standoff corpus and check every event against the schema.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Score predicted events against gold annotations.
    Score {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Agreement between two annotators of the same documents.
    Agree {
        #[arg(long = "annotator-a")]
        annotator_a: PathBuf,
        #[arg(long = "annotator-b")]
        annotator_b: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Train the extractor; `--out` is the checkpoint path.
    Train(TrainArgs),
    /// Run a checkpoint over notes; `--out` is the predicted corpus directory.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
    },
    /// Repeated hold-out comparison of feature sets for one note type.
    Predict {
        #[arg(long)]
        timelines: PathBuf,
        /// Corpus directory of extracted events.
        #[arg(long)]
        extracted: PathBuf,
        #[arg(long = "note-type", value_parser = parse_note_type)]
        note_type: NoteType,
        /// `raw<TAB>canonical` symptom normalization table.
        #[arg(long)]
        normalization: Option<PathBuf>,
        /// Also write every hold-out ROC curve here.
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Write a synthetic corpus, embeddings and timelines to `--out`.
    Synth,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long, value_enum, default_value_t = ReportFormat::Tsv)]
    format: ReportFormat,
    /// In any-overlap mode, also align arguments on overlapping triggers.
    #[arg(long)]
    overlap_arguments: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Tsv,
    Pretty,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Corpus evaluated after every epoch.
    #[arg(long)]
    dev_corpus: Option<PathBuf>,
    /// Embeddings for the dev corpus; the training file when absent.
    #[arg(long)]
    dev_embeddings: Option<PathBuf>,
    /// Train on the original Symptom argument spans.
    #[arg(long)]
    no_substitution: bool,
    /// Keep only Symptom triggers seen at least this often in the training corpus.
    #[arg(long)]
    min_symptom_count: Option<usize>,
    /// Per-epoch loss and dev F1 as TSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Runs one command line (`argv[0]` is the program name).
pub fn dispatch<S: AsRef<str>>(argv: &[S]) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(argv.iter().map(AsRef::as_ref)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(input_error("--threads must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Internal(e.into()))?;
    pool.install(|| execute(&cli))
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let schema = match &cli.schema {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| path.display().to_string()).input()?;
            load_schema(&text).with_context(|| path.display().to_string()).input()?
        }
        None => Schema::default(),
    };
    match &cli.command {
        Command::Validate { corpus } => validate(corpus, &schema, cli.out.as_deref()),
        Command::Score { gold, pred, report } => {
            let gold = read_corpus(gold)?;
            let pred = read_corpus(pred)?;
            let options = ScoreOptions { mode: cli.mode, arguments_follow_mode: report.overlap_arguments };
            let scores = score_documents_with(&gold, &pred, options).input()?;
            emit_report(&scores, report.format, cli.out.as_deref())
        }
        Command::Agree { annotator_a, annotator_b, report } => {
            let a = read_corpus(annotator_a)?;
            let b = read_corpus(annotator_b)?;
            let scores = agreement_report(&a, &b).input()?;
            emit_report(&scores, report.format, cli.out.as_deref())
        }
        Command::Train(args) => train_command(cli, args, &schema),
        Command::Extract { model, corpus, embeddings } => {
            let out = require_out(cli, "extract")?;
            let model = SpanModel::load(model).map_err(model_error)?;
            let corpus = read_corpus(corpus)?;
            let embeddings = read_embeddings(embeddings, &corpus)?;
            if embeddings.dim != model.input_dim() {
                return Err(input_error(format!(
                    "embeddings have dimension {} but the model expects {}",
                    embeddings.dim,
                    model.input_dim()
                )));
            }
            let predicted = model.extract_corpus(&corpus, &embeddings, &schema).map_err(model_error)?;
            let events: usize = predicted.iter().map(|d| d.events.len()).sum();
            write_corpus_dir(out, &predicted).input()?;
            info!("extracted {events} events from {} documents into {}", predicted.len(), out.display());
            Ok(())
        }
        Command::Predict { timelines, extracted, note_type, normalization, roc } => {
            let mut config: PredictionConfig = read_config(cli.config.as_deref())?;
            if let Some(seed) = cli.seed {
                config.holdout.seed = seed;
            }
            config.holdout.keep_curves |= roc.is_some();
            let timelines = load_timelines(timelines).input()?;
            let extracted: BTreeMap<String, AnnotatedDocument> =
                read_corpus(extracted)?.into_iter().map(|d| (d.doc_id().to_string(), d)).collect();
            let norm = match normalization {
                Some(path) => {
                    let text = fs::read_to_string(path).with_context(|| path.display().to_string()).input()?;
                    NormalizationMap::from_tsv(&text).with_context(|| path.display().to_string()).input()?
                }
                None => NormalizationMap::default_table(),
            };
            let matrix = build_feature_matrix(&timelines, &extracted, *note_type, &norm, &config);
            info!("{} samples, {} features for {note_type}", matrix.len(), matrix.columns.len());
            let report = compare_feature_sets(&matrix, *note_type, &config).input()?;
            if let Some(path) = roc {
                write_file(path, &report.roc_points_tsv())?;
            }
            emit(&report.to_tsv(), cli.out.as_deref())
        }
        Command::Synth => {
            let out = require_out(cli, "synth")?;
            let spec: SyntheticSpec = read_config(cli.config.as_deref())?;
            let data = make_synthetic_corpus(&spec, cli.seed.unwrap_or(0));
            data.write_to_dir(out).input()?;
            info!("wrote {} documents and {} timelines to {}", data.corpus.len(), data.timelines.len(), out.display());
            Ok(())
        }
    }
}

fn validate(corpus: &Path, schema: &Schema, out: Option<&Path>) -> Result<(), CliError> {
    let docs = read_corpus(corpus)?;
    let mut listing = String::from("doc_id\tevent\tviolation\n");
    let mut violations = 0;
    let mut events = 0;
    for doc in &docs {
        for (i, event) in doc.events.iter().enumerate() {
            events += 1;
            for v in validate_event(event, schema) {
                warn!("{} event {i} ({}): {v}", doc.doc_id(), event.event_type());
                let _ = writeln!(listing, "{}\t{i}\t{v}", doc.doc_id());
                violations += 1;
            }
        }
    }
    if let Some(path) = out {
        write_file(path, &listing)?;
    }
    info!("{} documents, {events} events, {violations} violations", docs.len());
    if violations > 0 {
        return Err(input_error(format!("{violations} schema violations in {}", corpus.display())));
    }
    Ok(())
}

fn train_command(cli: &Cli, args: &TrainArgs, schema: &Schema) -> Result<(), CliError> {
    let out = require_out(cli, "train")?;
    let mut config: ModelConfig = read_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.substitute = !args.no_substitution;
    config.validate().map_err(model_error)?;

    let mut corpus: Vec<AnnotatedDocument> = read_corpus(&args.corpus)?.iter().map(truncate_covid_triggers).collect();
    if let Some(min_count) = args.min_symptom_count {
        if min_count == 0 {
            return Err(input_error("--min-symptom-count must be at least 1"));
        }
        let vocabulary = build_symptom_vocabulary(&corpus, min_count);
        info!("{} symptom triggers occur at least {min_count} times", vocabulary.len());
        corpus = corpus.iter().map(|d| filter_symptoms(d, &vocabulary)).collect();
    }
    let embeddings = read_embeddings(&args.embeddings, &corpus)?;

    let dev_data = match &args.dev_corpus {
        Some(dir) => {
            let docs: Vec<AnnotatedDocument> = read_corpus(dir)?.iter().map(truncate_covid_triggers).collect();
            let emb = match &args.dev_embeddings {
                Some(path) => read_embeddings(path, &docs)?,
                None => read_embeddings(&args.embeddings, &docs)?,
            };
            Some((docs, emb))
        }
        None => None,
    };
    let dev = dev_data.as_ref().map(|(corpus, embeddings)| DevSet { corpus, embeddings });

    info!(
        "training on {} documents, substitution {}",
        corpus.len(),
        if config.substitute { "on" } else { "off" }
    );
    let (model, report) = train(&corpus, &embeddings, schema, &config, dev).map_err(model_error)?;
    model.save(out).map_err(model_error)?;
    if let Some(last) = report.epochs.last() {
        info!("final epoch {} loss {:.4}", last.epoch, last.loss);
        if let (Some(t), Some(l)) = (last.dev_trigger_f1, last.dev_labeled_f1) {
            info!("dev trigger F1 {t:.4}, labeled argument F1 {l:.4}");
        }
    }
    if let Some(path) = &args.report {
        write_file(path, &train_report_tsv(&report))?;
    }
    Ok(())
}

/// `epoch\tloss\tdev_trigger_f1\tdev_labeled_f1`; dev columns are empty
/// without a dev set.
pub fn train_report_tsv(report: &TrainReport) -> String {
    let mut out = String::from("epoch\tloss\tdev_trigger_f1\tdev_labeled_f1\n");
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for m in &report.epochs {
        let _ = writeln!(out, "{}\t{:.6}\t{}\t{}", m.epoch, m.loss, cell(m.dev_trigger_f1), cell(m.dev_labeled_f1));
    }
    out
}

fn require_out<'a>(cli: &'a Cli, command: &str) -> Result<&'a Path, CliError> {
    cli.out.as_deref().ok_or_else(|| input_error(format!("{command} needs --out")))
}

fn read_corpus(dir: &Path) -> Result<Vec<AnnotatedDocument>, CliError> {
    if !dir.is_dir() {
        return Err(input_error(format!("{} is not a directory", dir.display())));
    }
    read_corpus_dir(dir).input()
}

fn read_embeddings(path: &Path, corpus: &[AnnotatedDocument]) -> Result<EmbeddingTable, CliError> {
    let table = load_embedding_file(path).input()?;
    table.check_against(corpus).with_context(|| path.display().to_string()).input()?;
    Ok(table)
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| path.display().to_string()).input()?;
            serde_json::from_str(&text).with_context(|| path.display().to_string()).input()
        }
        None => Ok(T::default()),
    }
}

fn emit_report(report: &ScoreReport, format: ReportFormat, out: Option<&Path>) -> Result<(), CliError> {
    let all = report.all_triggers().prf();
    info!("trigger P {:.4} R {:.4} F1 {:.4}", all.precision, all.recall, all.f1);
    let text = match format {
        ReportFormat::Tsv => report.to_tsv(),
        ReportFormat::Pretty => report.to_pretty(),
    };
    emit(&text, out)
}

/// Writes to `out`, or to standard output when no path is given.
fn emit(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => write_file(path, text),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Internal(e.into())),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| parent.display().to_string()).input()?;
    }
    fs::write(path, text).with_context(|| path.display().to_string()).input()
}
