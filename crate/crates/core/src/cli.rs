//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 input or parse error, 3 internal
//! error. Every command that samples takes `--seed`; the default is
//! [`DEFAULT_SEED`].

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    build_corpus, extract, load_corpus, read_reference_table, save_corpus, write_skipped_report,
    SearchCorpus, SkippedRecord,
};
use crate::eval::{
    build_queries, evaluate_pipeline, evaluate_with_generator, render_summary, write_failures,
    write_rows, EvalConfig, EvalReport,
};
use crate::lm::{
    extract_query_windows, generate_clone_with_rng, ingest_generations, save_generations,
    CloneGenerator, GenerationConfig, GenerationRecord, IngestedGenerator, LanguageModel,
    NGramModel, SamplingGenerator, DEFAULT_MAX_TOKENS, DEFAULT_NUCLEUS_THRESHOLD, DEFAULT_SEED,
    DEFAULT_WINDOW_LEN,
};
use crate::retrieval::{extract_clone_span, Ranked, TfIdfIndex};
use crate::tokenizer::{tokenize_stream, LexOptions, Token, TokenSequence, START_OF_CLONE};

pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

fn input_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Internal(format!("writing {}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "clonerec",
    version,
    about = "Recommend real clone methods from language-model predictions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract, tokenize and deduplicate the methods listed in a reference table.
    BuildCorpus(BuildCorpusArgs),
    /// Fit a TF-IDF index on a corpus and write its snapshot.
    BuildIndex(BuildIndexArgs),
    /// Train the reference n-gram model on a corpus.
    TrainLm(TrainLmArgs),
    /// Sample a clone prediction for every <soc> window of a test stream.
    Generate(GenerateArgs),
    /// Rank corpus methods against a query.
    Recommend(RecommendArgs),
    /// Run the full evaluation and write a report directory.
    Evaluate(EvaluateArgs),
    /// Read contexts from standard input, one per line, and print recommendations.
    Query(QueryArgs),
}

#[derive(Debug, Args)]
pub struct BuildCorpusArgs {
    #[arg(long)]
    pub reference_table: PathBuf,
    #[arg(long)]
    pub source_root: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `<out>.skipped.jsonl`.
    #[arg(long)]
    pub skipped_report: Option<PathBuf>,
    /// Map unknown characters to <unk> instead of skipping the method.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainLmArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ORDER)]
    pub order: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    #[arg(long)]
    pub window_len: Option<usize>,
    #[arg(long)]
    pub nucleus_threshold: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub test_stream: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    /// Corpus file or index snapshot; detected from the first line.
    #[arg(long)]
    pub index: PathBuf,
    /// Whitespace-separated token texts.
    #[arg(long, group = "query")]
    pub tokens: Option<String>,
    /// Java source, tokenized and normalized before ranking.
    #[arg(long, group = "query")]
    pub query_file: Option<PathBuf>,
    /// Every generation in the file is a separate query.
    #[arg(long, group = "query")]
    pub generations: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub reference_table: Option<PathBuf>,
    #[arg(long)]
    pub source_root: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub test_stream: Option<PathBuf>,
    /// Score these generations instead of sampling from the model.
    #[arg(long)]
    pub generations: Option<PathBuf>,
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifestPaths {
    pub reference_table: Option<PathBuf>,
    pub source_root: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub test_stream: Option<PathBuf>,
    pub generations: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifestParameters {
    pub window_len: Option<usize>,
    pub nucleus_threshold: Option<f64>,
    pub order: Option<usize>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub max_tokens: Option<usize>,
}

/// Unix seconds. Honors `SOURCE_DATE_EPOCH` so reruns can be byte-identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started: u64,
    pub finished: u64,
}

/// Paths and parameters of a run. Command-line flags override the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub paths: ManifestPaths,
    pub parameters: ManifestParameters,
    pub timestamps: Option<Timestamps>,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($field:ident),*) => {
        $( if $src.$field.is_some() { $dst.$field = $src.$field.clone(); } )*
    };
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| input_err(path, e))?;
        toml::from_str(&text).map_err(|e| input_err(path, e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Fields set in `other` replace those in `self`.
    pub fn overlay(&mut self, other: &RunManifest) {
        overlay!(
            self.paths,
            other.paths,
            reference_table,
            source_root,
            corpus,
            index,
            model,
            test_stream,
            generations,
            report_dir
        );
        overlay!(
            self.parameters,
            other.parameters,
            window_len,
            nucleus_threshold,
            order,
            k,
            seed,
            max_tokens
        );
        if other.timestamps.is_some() {
            self.timestamps = other.timestamps;
        }
    }

    fn with_file(file: Option<&Path>, flags: RunManifest) -> Result<Self, CliError> {
        let mut manifest = match file {
            Some(path) => RunManifest::load(path)?,
            None => RunManifest::default(),
        };
        manifest.overlay(&flags);
        Ok(manifest)
    }
}

/// Parameters with defaults applied and ranges checked.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub window_len: usize,
    pub nucleus_threshold: f64,
    pub order: usize,
    pub k: usize,
    pub seed: u64,
    pub max_tokens: usize,
}

impl ManifestParameters {
    pub fn resolve(&self) -> Result<Parameters, CliError> {
        let p = Parameters {
            window_len: self.window_len.unwrap_or(DEFAULT_WINDOW_LEN),
            nucleus_threshold: self.nucleus_threshold.unwrap_or(DEFAULT_NUCLEUS_THRESHOLD),
            order: self.order.unwrap_or(DEFAULT_ORDER),
            k: self.k.unwrap_or(DEFAULT_K),
            seed: self.seed.unwrap_or(DEFAULT_SEED),
            max_tokens: self.max_tokens.unwrap_or(DEFAULT_MAX_TOKENS),
        };
        let usage = |m: &str| Err(CliError::Usage(m.to_string()));
        if !(p.nucleus_threshold > 0.0 && p.nucleus_threshold <= 1.0) {
            return Err(CliError::Usage(format!(
                "--nucleus-threshold must lie in (0, 1], got {}",
                p.nucleus_threshold
            )));
        }
        if p.window_len == 0 {
            return usage("--window-len must be >= 1");
        }
        if p.order == 0 {
            return usage("--order must be >= 1");
        }
        if p.k == 0 {
            return usage("--k must be >= 1");
        }
        if p.max_tokens == 0 {
            return usage("--max-tokens must be >= 1");
        }
        Ok(p)
    }
}

impl From<&Parameters> for ManifestParameters {
    fn from(p: &Parameters) -> Self {
        Self {
            window_len: Some(p.window_len),
            nucleus_threshold: Some(p.nucleus_threshold),
            order: Some(p.order),
            k: Some(p.k),
            seed: Some(p.seed),
            max_tokens: Some(p.max_tokens),
        }
    }
}

impl Parameters {
    fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            nucleus_threshold: self.nucleus_threshold,
            max_tokens: self.max_tokens,
            rng_seed: self.seed,
            ..GenerationConfig::default()
        }
    }
}

impl SamplingArgs {
    fn parameters(&self) -> ManifestParameters {
        ManifestParameters {
            window_len: self.window_len,
            nucleus_threshold: self.nucleus_threshold,
            seed: self.seed,
            max_tokens: self.max_tokens,
            ..Default::default()
        }
    }
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing --{flag} (flag or manifest)")))
}

fn now_unix() -> u64 {
    if let Some(epoch) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
    {
        return epoch;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| write_err(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| write_err(path, e))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| input_err(path, e))
}

fn load_corpus_file(path: &Path) -> Result<SearchCorpus, CliError> {
    load_corpus(path).map_err(|e| input_err(path, e))
}

fn load_model(path: &Path) -> Result<NGramModel, CliError> {
    NGramModel::load(path).map_err(|e| input_err(path, e))
}

fn lex_stream(path: &Path) -> Result<TokenSequence, CliError> {
    tokenize_stream(&read_text(path)?, LexOptions::default()).map_err(|e| input_err(path, e))
}

fn fit_index(corpus: &SearchCorpus) -> Result<TfIdfIndex, CliError> {
    TfIdfIndex::fit(corpus).map_err(|e| CliError::Input(format!("indexing corpus: {e}")))
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code.
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
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match execute(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::BuildCorpus(a) => cmd_build_corpus(&a, out),
        Command::BuildIndex(a) => cmd_build_index(&a, out),
        Command::TrainLm(a) => cmd_train_lm(&a, out),
        Command::Generate(a) => cmd_generate(&a, out),
        Command::Recommend(a) => cmd_recommend(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::Query(a) => {
            let stdin = io::stdin();
            cmd_query(&a, stdin.lock(), out)
        }
    }
}

fn stdout_err(e: io::Error) -> CliError {
    CliError::Internal(format!("writing output: {e}"))
}

struct BuiltCorpus {
    corpus: SearchCorpus,
    skipped: Vec<SkippedRecord>,
    collapsed: usize,
    requested: usize,
}

fn build_from_references(
    table: &Path,
    root: &Path,
    options: LexOptions,
) -> Result<BuiltCorpus, CliError> {
    if !root.is_dir() {
        return Err(CliError::Input(format!(
            "source root {} is not a directory",
            root.display()
        )));
    }
    let references = read_reference_table(table).map_err(|e| input_err(table, e))?;
    let extraction = extract(&references, root);
    let build = build_corpus(&extraction.methods, options);
    let collapsed = build.collapsed.len();
    let mut skipped: Vec<SkippedRecord> = extraction
        .failures
        .iter()
        .map(SkippedRecord::from)
        .collect();
    skipped.extend(build.skipped);
    skipped.sort_by_key(|s| s.record_id);
    Ok(BuiltCorpus {
        corpus: build.corpus,
        skipped,
        collapsed,
        requested: references.len(),
    })
}

pub fn cmd_build_corpus(a: &BuildCorpusArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let options = if a.lenient {
        LexOptions::lenient()
    } else {
        LexOptions::default()
    };
    let built = build_from_references(&a.reference_table, &a.source_root, options)?;
    save_corpus(&built.corpus, &a.out).map_err(|e| write_err(&a.out, e))?;
    let report_path = a.skipped_report.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".skipped.jsonl");
        PathBuf::from(p)
    });
    let mut w = create(&report_path)?;
    write_skipped_report(&built.skipped, &mut w).map_err(|e| write_err(&report_path, e))?;
    writeln!(
        out,
        "{} references, {} records, {} skipped, {} duplicates collapsed",
        built.requested,
        built.corpus.len(),
        built.skipped.len(),
        built.collapsed
    )
    .map_err(stdout_err)?;
    if built.requested > 0 && built.corpus.is_empty() {
        return Err(CliError::Input(format!(
            "every reference failed; see {}",
            report_path.display()
        )));
    }
    Ok(())
}

pub fn cmd_build_index(a: &BuildIndexArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let corpus = load_corpus_file(&a.corpus)?;
    let index = fit_index(&corpus)?;
    index
        .save_snapshot(&a.out)
        .map_err(|e| write_err(&a.out, e))?;
    writeln!(
        out,
        "{} documents, {} terms",
        index.num_docs(),
        index.num_terms()
    )
    .map_err(stdout_err)
}

fn train(corpus: &SearchCorpus, order: usize) -> Result<NGramModel, CliError> {
    let sequences: Vec<Vec<&str>> = corpus.records().iter().map(|r| r.tokens.texts()).collect();
    NGramModel::train(&sequences, order).map_err(|e| CliError::Input(format!("training: {e}")))
}

pub fn cmd_train_lm(a: &TrainLmArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.order == 0 {
        return Err(CliError::Usage("--order must be >= 1".into()));
    }
    let corpus = load_corpus_file(&a.corpus)?;
    let model = train(&corpus, a.order)?;
    model.save(&a.out).map_err(|e| write_err(&a.out, e))?;
    writeln!(
        out,
        "order {} model, vocabulary {}",
        model.order(),
        model.vocab_size()
    )
    .map_err(stdout_err)
}

pub fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let flags = RunManifest {
        paths: ManifestPaths {
            model: a.model.clone(),
            test_stream: a.test_stream.clone(),
            generations: a.out.clone(),
            ..Default::default()
        },
        parameters: a.sampling.parameters(),
        timestamps: None,
    };
    let manifest = RunManifest::with_file(a.manifest.as_deref(), flags)?;
    let params = manifest.parameters.resolve()?;
    let model_path = require(&manifest.paths.model, "model")?;
    let stream_path = require(&manifest.paths.test_stream, "test-stream")?;
    let out_path = require(&manifest.paths.generations, "out")?;

    let model = load_model(model_path)?;
    let stream = lex_stream(stream_path)?;
    let windows = extract_query_windows(&stream, params.window_len);
    if windows.is_empty() {
        eprintln!(
            "warning: {} contains no {START_OF_CLONE}; writing an empty generations file",
            stream_path.display()
        );
    }
    let generator = SamplingGenerator {
        model: &model,
        config: params.generation(),
    };
    let records = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            generator
                .generate(i as u64, &w.tokens)
                .map(|g| GenerationRecord::new(i as u64, &w.tokens, &g))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Internal(format!("generation: {e}")))?;
    save_generations(&records, out_path).map_err(|e| write_err(out_path, e))?;
    let truncated = records.iter().filter(|r| r.truncated).count();
    writeln!(
        out,
        "{} generations, {} truncated",
        records.len(),
        truncated
    )
    .map_err(stdout_err)
}

/// Either a full corpus (functionality ids known) or an index snapshot.
enum Searchable {
    Corpus(SearchCorpus, TfIdfIndex),
    Snapshot(TfIdfIndex),
}

impl Searchable {
    fn load(path: &Path) -> Result<Self, CliError> {
        let file = File::open(path).map_err(|e| input_err(path, e))?;
        let mut first = String::new();
        BufReader::new(file)
            .read_line(&mut first)
            .map_err(|e| input_err(path, e))?;
        let is_snapshot = serde_json::from_str::<serde_json::Value>(&first)
            .ok()
            .and_then(|v| {
                v.get("format")
                    .and_then(|f| f.as_str())
                    .map(|f| f == "clonerec-tfidf")
            })
            .unwrap_or(false);
        if is_snapshot {
            let index = TfIdfIndex::load_snapshot(path).map_err(|e| input_err(path, e))?;
            Ok(Searchable::Snapshot(index))
        } else {
            let corpus = load_corpus_file(path)?;
            let index = fit_index(&corpus)?;
            Ok(Searchable::Corpus(corpus, index))
        }
    }

    fn index(&self) -> &TfIdfIndex {
        match self {
            Searchable::Corpus(_, i) | Searchable::Snapshot(i) => i,
        }
    }

    fn functionality(&self, r: &Ranked) -> String {
        match self {
            Searchable::Corpus(c, _) => c
                .get(r.record_id)
                .map_or_else(|| "-".to_string(), |rec| rec.functionality_id.to_string()),
            Searchable::Snapshot(_) => "-".to_string(),
        }
    }
}

fn print_ranking(
    out: &mut dyn Write,
    target: &Searchable,
    tokens: &[String],
    k: usize,
) -> io::Result<()> {
    for (rank, r) in target.index().rank_tokens(tokens, k).iter().enumerate() {
        writeln!(
            out,
            "{}\t{}\t{}\t{:.6}",
            rank + 1,
            r.record_id,
            target.functionality(r),
            r.score
        )?;
    }
    Ok(())
}

pub fn cmd_recommend(a: &RecommendArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.k == 0 {
        return Err(CliError::Usage("--k must be >= 1".into()));
    }
    let target = Searchable::load(&a.index)?;
    let queries: Vec<(Option<u64>, Vec<String>)> = if let Some(text) = &a.tokens {
        let tokens = TokenSequence::from_texts(text.split_whitespace());
        vec![(None, span_texts(&tokens))]
    } else if let Some(path) = &a.query_file {
        vec![(None, span_texts(&lex_stream(path)?))]
    } else if let Some(path) = &a.generations {
        ingest_generations(path)
            .map_err(|e| input_err(path, e))?
            .into_iter()
            .map(|g| {
                let tokens = g.generated_tokens();
                let anchor = generation_anchor(&g.context_tokens(), &tokens);
                (Some(g.query_id), span_texts(&tokens[anchor..]))
            })
            .collect()
    } else {
        return Err(CliError::Usage(
            "one of --tokens, --query-file or --generations is required".into(),
        ));
    };
    writeln!(out, "rank\trecord_id\tfunctionality_id\tscore").map_err(stdout_err)?;
    for (id, tokens) in &queries {
        if let Some(id) = id {
            writeln!(out, "# query {id}").map_err(stdout_err)?;
        }
        print_ranking(out, &target, tokens, a.k).map_err(stdout_err)?;
    }
    Ok(())
}

/// The clone span when the tokens carry a `<soc>`, otherwise all of them.
fn span_texts(tokens: &[Token]) -> Vec<String> {
    match extract_clone_span(tokens) {
        Ok(span) => span.tokens.into_texts(),
        Err(_) => tokens.iter().map(|t| t.text.clone()).collect(),
    }
}

/// Where the predicted clone starts: the context's last `<soc>` when the
/// output extends the context, else the beginning.
fn generation_anchor(context: &[Token], generated: &[Token]) -> usize {
    if generated.starts_with(context) {
        context
            .iter()
            .rposition(|t| t.is(START_OF_CLONE))
            .unwrap_or(0)
    } else {
        0
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let started = now_unix();
    let mut parameters = a.sampling.parameters();
    parameters.order = a.order;
    parameters.k = a.k;
    let flags = RunManifest {
        paths: ManifestPaths {
            reference_table: a.reference_table.clone(),
            source_root: a.source_root.clone(),
            corpus: a.corpus.clone(),
            index: a.index.clone(),
            model: a.model.clone(),
            test_stream: a.test_stream.clone(),
            generations: a.generations.clone(),
            report_dir: a.report_dir.clone(),
        },
        parameters,
        timestamps: None,
    };
    let mut manifest = RunManifest::with_file(a.manifest.as_deref(), flags)?;
    let params = manifest.parameters.resolve()?;
    let paths = manifest.paths.clone();
    let report_dir = require(&paths.report_dir, "report-dir")?;
    let stream_path = require(&paths.test_stream, "test-stream")?;

    let corpus = match (&paths.corpus, &paths.reference_table, &paths.source_root) {
        (Some(path), _, _) => load_corpus_file(path)?,
        (None, Some(table), Some(root)) => {
            build_from_references(table, root, LexOptions::default())?.corpus
        }
        _ => {
            return Err(CliError::Usage(
                "evaluate needs --corpus, or --reference-table with --source-root".into(),
            ))
        }
    };
    let model = match &paths.model {
        Some(path) => load_model(path)?,
        None => train(&corpus, params.order)?,
    };
    let index = match &paths.index {
        Some(path) => TfIdfIndex::load_snapshot(path).map_err(|e| input_err(path, e))?,
        None => fit_index(&corpus)?,
    };
    let stream = lex_stream(stream_path)?;
    let queries = build_queries(&stream, params.window_len);
    if queries.is_empty() {
        eprintln!(
            "warning: {} contains no {START_OF_CLONE}",
            stream_path.display()
        );
    }

    let report: EvalReport = match &paths.generations {
        Some(path) => {
            let records = ingest_generations(path).map_err(|e| input_err(path, e))?;
            let generator = IngestedGenerator::new(records);
            evaluate_with_generator(&generator, &model, &corpus, &index, &queries, params.k)
        }
        None => {
            let config = EvalConfig {
                generation: params.generation(),
                top_k: params.k,
            };
            evaluate_pipeline(&model, &corpus, &index, &queries, &config)
        }
    };

    fs::create_dir_all(report_dir).map_err(|e| write_err(report_dir, e))?;
    let rows_path = report_dir.join("rows.jsonl");
    write_rows(&report.results, create(&rows_path)?).map_err(|e| write_err(&rows_path, e))?;
    let failures_path = report_dir.join("failures.jsonl");
    write_failures(&report.failures, create(&failures_path)?)
        .map_err(|e| write_err(&failures_path, e))?;
    let summary_path = report_dir.join("summary.json");
    let mut w = create(&summary_path)?;
    serde_json::to_writer_pretty(&mut w, &report.summary)
        .map_err(io::Error::from)
        .and_then(|_| w.write_all(b"\n"))
        .and_then(|_| w.flush())
        .map_err(|e| write_err(&summary_path, e))?;
    let text = render_summary(&report.summary);
    let text_path = report_dir.join("summary.txt");
    fs::write(&text_path, &text).map_err(|e| write_err(&text_path, e))?;

    manifest.parameters = ManifestParameters::from(&params);
    manifest.timestamps = Some(Timestamps {
        started,
        finished: now_unix(),
    });
    let manifest_path = report_dir.join("manifest.toml");
    fs::write(&manifest_path, manifest.to_toml()).map_err(|e| write_err(&manifest_path, e))?;

    out.write_all(text.as_bytes()).map_err(stdout_err)?;
    if !queries.is_empty() && report.results.is_empty() {
        return Err(CliError::Input(format!(
            "every query failed; see {}",
            failures_path.display()
        )));
    }
    Ok(())
}

/// One context per input line. Per-line failures are reported on the output
/// and the loop continues.
pub fn cmd_query<R: BufRead>(a: &QueryArgs, input: R, out: &mut dyn Write) -> Result<(), CliError> {
    let params = a.sampling.parameters();
    let params = ManifestParameters {
        k: Some(a.k),
        ..params
    }
    .resolve()?;
    let model = load_model(&a.model)?;
    let corpus = load_corpus_file(&a.corpus)?;
    let target = Searchable::Corpus(corpus.clone(), fit_index(&corpus)?);
    let config = params.generation();

    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| CliError::Input(format!("reading input: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        writeln!(out, "# line {lineno}").map_err(stdout_err)?;
        match predict_span(&model, &line, &config, i as u64) {
            Ok(span) => print_ranking(out, &target, &span, params.k).map_err(stdout_err)?,
            Err(message) => writeln!(out, "error: {message}").map_err(stdout_err)?,
        }
    }
    Ok(())
}

fn predict_span(
    model: &NGramModel,
    line: &str,
    config: &GenerationConfig,
    query_id: u64,
) -> Result<Vec<String>, String> {
    let context = tokenize_stream(line, LexOptions::default()).map_err(|e| e.to_string())?;
    if !context.iter().any(|t| t.is(START_OF_CLONE)) {
        return Err(format!("context contains no {START_OF_CLONE}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed.wrapping_add(query_id));
    let generation =
        generate_clone_with_rng(model, &context, config, &mut rng).map_err(|e| e.to_string())?;
    let anchor = generation_anchor(&context, &generation.tokens);
    Ok(span_texts(&generation.tokens[anchor..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("clonerec").chain(args.iter().copied()))
    }

    #[test]
    fn flags_override_manifest() {
        let file: RunManifest = toml::from_str(
            "[paths]\ncorpus = \"a.jsonl\"\nmodel = \"m.json\"\n[parameters]\nwindow_len = 8\nseed = 5\n",
        )
        .unwrap();
        let mut merged = file.clone();
        merged.overlay(&RunManifest {
            paths: ManifestPaths {
                corpus: Some("b.jsonl".into()),
                ..Default::default()
            },
            parameters: ManifestParameters {
                seed: Some(9),
                ..Default::default()
            },
            timestamps: None,
        });
        assert_eq!(merged.paths.corpus, Some(PathBuf::from("b.jsonl")));
        assert_eq!(merged.paths.model, Some(PathBuf::from("m.json")));
        assert_eq!(merged.parameters.window_len, Some(8));
        assert_eq!(merged.parameters.seed, Some(9));
    }

    #[test]
    fn manifest_toml_round_trip() {
        let params = ManifestParameters::default().resolve().unwrap();
        let m = RunManifest {
            paths: ManifestPaths {
                report_dir: Some("out".into()),
                ..Default::default()
            },
            parameters: ManifestParameters::from(&params),
            timestamps: Some(Timestamps {
                started: 1,
                finished: 2,
            }),
        };
        let back: RunManifest = toml::from_str(&m.to_toml()).unwrap();
        assert_eq!(back, m);
        assert!(toml::from_str::<RunManifest>("[parameters]\nbogus = 1\n").is_err());
    }

    #[test]
    fn defaults_and_range_checks() {
        let p = ManifestParameters::default().resolve().unwrap();
        assert_eq!(p.seed, DEFAULT_SEED);
        assert_eq!(p.k, DEFAULT_K);
        assert_eq!(p.nucleus_threshold, DEFAULT_NUCLEUS_THRESHOLD);
        for bad in [0.0, -0.5, 1.5, f64::NAN] {
            let e = ManifestParameters {
                nucleus_threshold: Some(bad),
                ..Default::default()
            }
            .resolve()
            .unwrap_err();
            assert_eq!(e.exit_code(), 1);
        }
        let e = ManifestParameters {
            k: Some(0),
            ..Default::default()
        }
        .resolve()
        .unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn argument_parsing() {
        assert!(parse(&[
            "recommend",
            "--index",
            "c.jsonl",
            "--tokens",
            "a b",
            "--k",
            "3"
        ])
        .is_ok());
        assert!(parse(&[
            "recommend",
            "--index",
            "c",
            "--tokens",
            "a",
            "--query-file",
            "q"
        ])
        .is_err());
        assert!(parse(&["train-lm", "--corpus", "c"]).is_err());
        assert!(parse(&["bogus"]).is_err());
        // help and version go to stdout and exit 0; everything else is a usage error
        assert!(!parse(&["--version"]).unwrap_err().use_stderr());
        assert!(parse(&["frobnicate"]).unwrap_err().use_stderr());
    }

    #[test]
    fn generation_anchor_uses_last_soc() {
        let ctx = TokenSequence::from_texts(["<soc>", "a", "<eoc>", "<soc>", "b"]);
        let gen = TokenSequence::from_texts(["<soc>", "a", "<eoc>", "<soc>", "b", "c", "<eoc>"]);
        assert_eq!(generation_anchor(&ctx, &gen), 3);
        assert_eq!(span_texts(&gen[3..]), ["<soc>", "b", "c", "<eoc>"]);
        let other = TokenSequence::from_texts(["x", "<soc>", "y"]);
        assert_eq!(generation_anchor(&ctx, &other), 0);
        assert_eq!(
            span_texts(&TokenSequence::from_texts(["p", "q"])),
            ["p", "q"]
        );
    }
}
