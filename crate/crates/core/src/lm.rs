//! Clone-method generation at desk scale.
//!
//! [`NGramModel`] is the reference generator: an order-n model with stupid
//! backoff (factor 0.4) down to an add-one smoothed unigram level, with
//! every per-context score vector renormalized into a true distribution.
//! Anything implementing [`LanguageModel`] can be scored with [`perplexity`]
//! and decoded with [`generate_clone`], and [`CloneGenerator`] lets the
//! evaluation harness consume either a model or externally produced output
//! (see [`ingest_generations`]).

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{Token, TokenSequence, END_OF_CLONE, META_TOKENS, START_OF_CLONE, UNKNOWN};

pub const DEFAULT_BACKOFF: f64 = 0.4;
pub const DEFAULT_NUCLEUS_THRESHOLD: f64 = 0.95;
pub const DEFAULT_WINDOW_LEN: usize = 20;
pub const DEFAULT_MAX_TOKENS: usize = 512;
pub const DEFAULT_SEED: u64 = 20_200_909;

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("cannot train on an empty set of sequences")]
    EmptyTrainingSet,
    #[error("n-gram order must be >= 1, got {0}")]
    InvalidOrder(usize),
    #[error("perplexity needs at least one token")]
    EmptySequence,
    #[error("generation needs a non-empty context")]
    EmptyContext,
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("no generation recorded for query {0}")]
    MissingGeneration(u64),
    #[error("recorded context for query {0} differs from the query window")]
    ContextMismatch(u64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SampleError {
    #[error("distribution is empty, all-zero, or has negative/non-finite mass")]
    DegenerateDistribution,
    #[error("nucleus threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
}

/// The probability interface the rest of the pipeline needs from a model.
pub trait LanguageModel {
    fn vocabulary(&self) -> &[String];

    /// Id of `text`, or of `<unk>` when the text is not in the vocabulary.
    fn token_id(&self, text: &str) -> TokenId;

    /// Next-token distribution indexed by token id. Sums to 1.
    fn next_distribution(&self, context: &[TokenId]) -> Vec<f64>;

    fn vocab_size(&self) -> usize {
        self.vocabulary().len()
    }

    fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId>
    where
        Self: Sized,
    {
        tokens.iter().map(|t| self.token_id(t.as_ref())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Continuations {
    total: u64,
    /// (next token, count), sorted by token id
    next: Vec<(TokenId, u64)>,
}

/// Order-n count model over a closed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    backoff: f64,
    vocab: Vec<String>,
    ids: HashMap<String, TokenId>,
    unigrams: Vec<u64>,
    unigram_total: u64,
    /// `levels[k - 1]` maps a k-token context to its continuations.
    levels: Vec<HashMap<Vec<TokenId>, Continuations>>,
}

impl NGramModel {
    /// Counts every k-gram (k <= `order`) of the concatenated `sequences`.
    pub fn train<Seq, T>(sequences: &[Seq], order: usize) -> Result<Self, LmError>
    where
        Seq: AsRef<[T]>,
        T: AsRef<str>,
    {
        Self::train_with_backoff(sequences, order, DEFAULT_BACKOFF)
    }

    pub fn train_with_backoff<Seq, T>(
        sequences: &[Seq],
        order: usize,
        backoff: f64,
    ) -> Result<Self, LmError>
    where
        Seq: AsRef<[T]>,
        T: AsRef<str>,
    {
        if order == 0 {
            return Err(LmError::InvalidOrder(order));
        }
        let stream: Vec<&str> = sequences
            .iter()
            .flat_map(|s| s.as_ref().iter().map(|t| t.as_ref()))
            .collect();
        if stream.is_empty() {
            return Err(LmError::EmptyTrainingSet);
        }

        let observed: BTreeSet<&str> = stream
            .iter()
            .copied()
            .filter(|t| !META_TOKENS.contains(t))
            .collect();
        let vocab: Vec<String> = META_TOKENS
            .iter()
            .copied()
            .chain(observed)
            .map(str::to_owned)
            .collect();
        let ids: HashMap<String, TokenId> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        let encoded: Vec<TokenId> = stream.iter().map(|t| ids[*t]).collect();

        let mut unigrams = vec![0u64; vocab.len()];
        for &id in &encoded {
            unigrams[id as usize] += 1;
        }

        let mut raw: Vec<HashMap<Vec<TokenId>, HashMap<TokenId, u64>>> =
            vec![HashMap::new(); order - 1];
        for ctx_len in 1..order {
            for gram in encoded.windows(ctx_len + 1) {
                *raw[ctx_len - 1]
                    .entry(gram[..ctx_len].to_vec())
                    .or_default()
                    .entry(gram[ctx_len])
                    .or_default() += 1;
            }
        }
        let levels = raw
            .into_iter()
            .map(|level| {
                level
                    .into_iter()
                    .map(|(ctx, next)| {
                        let mut next: Vec<_> = next.into_iter().collect();
                        next.sort_unstable();
                        let total = next.iter().map(|(_, c)| c).sum();
                        (ctx, Continuations { total, next })
                    })
                    .collect()
            })
            .collect();

        Ok(Self {
            order,
            backoff,
            vocab,
            ids,
            unigrams,
            unigram_total: encoded.len() as u64,
            levels,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn backoff(&self) -> f64 {
        self.backoff
    }

    /// Raw count of the k-gram `gram` (1 <= k <= order); 0 if unseen or if a
    /// token is out of vocabulary.
    pub fn count<S: AsRef<str>>(&self, gram: &[S]) -> u64 {
        let Some(ids) = gram
            .iter()
            .map(|t| self.ids.get(t.as_ref()).copied())
            .collect::<Option<Vec<_>>>()
        else {
            return 0;
        };
        match ids.len() {
            0 => 0,
            1 => self.unigrams[ids[0] as usize],
            k if k <= self.order => {
                let (ctx, last) = ids.split_at(k - 1);
                self.levels[k - 2]
                    .get(ctx)
                    .and_then(|c| {
                        c.next
                            .binary_search_by_key(&last[0], |&(id, _)| id)
                            .ok()
                            .map(|i| c.next[i].1)
                    })
                    .unwrap_or(0)
            }
            _ => 0,
        }
    }

    /// Convenience wrapper over [`LanguageModel::next_distribution`] that
    /// takes token texts and returns (text, probability) pairs.
    pub fn distribution_for<S: AsRef<str>>(&self, context: &[S]) -> Vec<(&str, f64)> {
        let ids = self.encode(context);
        self.vocab
            .iter()
            .map(String::as_str)
            .zip(self.next_distribution(&ids))
            .collect()
    }
}

impl LanguageModel for NGramModel {
    fn vocabulary(&self) -> &[String] {
        &self.vocab
    }

    fn token_id(&self, text: &str) -> TokenId {
        self.ids
            .get(text)
            .copied()
            .unwrap_or_else(|| self.ids[UNKNOWN])
    }

    fn next_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let v = self.vocab.len() as f64;
        let denom = self.unigram_total as f64 + v;
        let mut scores: Vec<f64> = self
            .unigrams
            .iter()
            .map(|&c| (c as f64 + 1.0) / denom)
            .collect();

        let usable = context.len().min(self.order - 1);
        let ctx = &context[context.len() - usable..];
        // shortest suffix first; each seen level overrides its observed
        // continuations and discounts everything else by the backoff factor
        for len in 1..=usable {
            for s in scores.iter_mut() {
                *s *= self.backoff;
            }
            if let Some(cont) = self.levels[len - 1].get(&ctx[usable - len..]) {
                let total = cont.total as f64;
                for &(id, c) in &cont.next {
                    scores[id as usize] = c as f64 / total;
                }
            }
        }

        let z: f64 = scores.iter().sum();
        for s in scores.iter_mut() {
            *s /= z;
        }
        scores
    }
}

/// Indices of the nucleus: the shortest prefix of tokens ordered by
/// descending probability (ties by ascending id) whose cumulative mass
/// reaches `p` of the total.
pub fn nucleus_set(dist: &[f64], p: f64) -> Result<Vec<usize>, SampleError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(SampleError::InvalidThreshold(p));
    }
    if dist.is_empty() || dist.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(SampleError::DegenerateDistribution);
    }
    let total: f64 = dist.iter().sum();
    if total <= 0.0 {
        return Err(SampleError::DegenerateDistribution);
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));

    let target = p * total;
    let mut cum = 0.0;
    for (i, &id) in order.iter().enumerate() {
        cum += dist[id];
        if cum >= target {
            order.truncate(i + 1);
            break;
        }
    }
    Ok(order)
}

/// Samples a token id from the nucleus of `dist`, renormalized.
pub fn nucleus_sample<R: Rng + ?Sized>(
    dist: &[f64],
    p: f64,
    rng: &mut R,
) -> Result<usize, SampleError> {
    let nucleus = nucleus_set(dist, p)?;
    let mass: f64 = nucleus.iter().map(|&i| dist[i]).sum();
    let u = rng.random::<f64>() * mass;
    let mut cum = 0.0;
    for &id in &nucleus {
        cum += dist[id];
        if u < cum {
            return Ok(id);
        }
    }
    // rounding put u at the very top of the mass; take the last token with
    // nonzero probability
    Ok(*nucleus
        .iter()
        .rev()
        .find(|&&i| dist[i] > 0.0)
        .expect("nucleus has positive mass"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub nucleus_threshold: f64,
    pub max_tokens: usize,
    pub stop_token: String,
    pub rng_seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            nucleus_threshold: DEFAULT_NUCLEUS_THRESHOLD,
            max_tokens: DEFAULT_MAX_TOKENS,
            stop_token: END_OF_CLONE.to_string(),
            rng_seed: DEFAULT_SEED,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if !(self.nucleus_threshold > 0.0 && self.nucleus_threshold <= 1.0) {
            return Err(LmError::InvalidConfig(format!(
                "nucleus_threshold must lie in (0, 1], got {}",
                self.nucleus_threshold
            )));
        }
        if self.max_tokens == 0 {
            return Err(LmError::InvalidConfig("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Context plus sampled continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: TokenSequence,
    /// Hit `max_tokens` before emitting the stop token.
    pub truncated: bool,
}

/// Extends `context` with nucleus-sampled tokens until the stop token is
/// emitted (and kept) or `max_tokens` new tokens have been produced. The
/// rng is seeded from `config.rng_seed`.
pub fn generate_clone<M: LanguageModel, S: AsRef<str>>(
    model: &M,
    context: &[S],
    config: &GenerationConfig,
) -> Result<Generation, LmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    generate_clone_with_rng(model, context, config, &mut rng)
}

pub fn generate_clone_with_rng<M: LanguageModel, S: AsRef<str>, R: Rng + ?Sized>(
    model: &M,
    context: &[S],
    config: &GenerationConfig,
    rng: &mut R,
) -> Result<Generation, LmError> {
    config.validate()?;
    if context.is_empty() {
        return Err(LmError::EmptyContext);
    }
    let mut ids = model.encode(context);
    let mut tokens = TokenSequence::from_texts(context);
    for _ in 0..config.max_tokens {
        let dist = model.next_distribution(&ids);
        let next = nucleus_sample(&dist, config.nucleus_threshold, rng)?;
        let text = &model.vocabulary()[next];
        ids.push(next as TokenId);
        tokens.push(Token::from_text(text));
        if *text == config.stop_token {
            return Ok(Generation {
                tokens,
                truncated: false,
            });
        }
    }
    Ok(Generation {
        tokens,
        truncated: true,
    })
}

/// exp of the mean negative log-likelihood (natural log) of `tokens`, each
/// conditioned on everything before it; the first token is conditioned on
/// the empty context.
pub fn perplexity<M: LanguageModel, S: AsRef<str>>(
    model: &M,
    tokens: &[S],
) -> Result<f64, LmError> {
    if tokens.is_empty() {
        return Err(LmError::EmptySequence);
    }
    let ids = model.encode(tokens);
    let nll: f64 = (0..ids.len())
        .map(|i| -model.next_distribution(&ids[..i])[ids[i] as usize].ln())
        .sum();
    Ok((nll / ids.len() as f64).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryWindow {
    pub tokens: TokenSequence,
    /// Offset of the first token in the source stream.
    pub offset: usize,
}

impl QueryWindow {
    /// Position (within the window) of the last `<soc>`, i.e. the start of
    /// the clone this window asks for.
    pub fn anchor(&self) -> usize {
        self.tokens
            .iter()
            .rposition(|t| t.is(START_OF_CLONE))
            .expect("query windows contain <soc>")
    }
}

/// Every stride-1 window of `window_len` tokens that contains `<soc>`.
pub fn extract_query_windows(stream: &[Token], window_len: usize) -> Vec<QueryWindow> {
    if window_len == 0 || stream.len() < window_len {
        return Vec::new();
    }
    // prefix counts of <soc>
    let mut soc_before = Vec::with_capacity(stream.len() + 1);
    soc_before.push(0usize);
    for t in stream {
        let last = *soc_before.last().unwrap();
        soc_before.push(last + usize::from(t.is(START_OF_CLONE)));
    }
    (0..=stream.len() - window_len)
        .filter(|&off| soc_before[off + window_len] > soc_before[off])
        .map(|offset| QueryWindow {
            tokens: stream[offset..offset + window_len].to_vec().into(),
            offset,
        })
        .collect()
}

/// Source of clone predictions for the evaluation harness.
pub trait CloneGenerator: Sync {
    fn generate(&self, query_id: u64, context: &TokenSequence) -> Result<Generation, LmError>;
}

/// Samples from a [`LanguageModel`]; query `q` uses seed `rng_seed + q` so
/// queries are independent and reproducible in any order.
pub struct SamplingGenerator<'a, M> {
    pub model: &'a M,
    pub config: GenerationConfig,
}

impl<M: LanguageModel + Sync> CloneGenerator for SamplingGenerator<'_, M> {
    fn generate(&self, query_id: u64, context: &TokenSequence) -> Result<Generation, LmError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.rng_seed.wrapping_add(query_id));
        generate_clone_with_rng(self.model, context, &self.config, &mut rng)
    }
}

/// Replays generations produced elsewhere, keyed by query id.
#[derive(Debug, Default)]
pub struct IngestedGenerator {
    by_query: HashMap<u64, (Vec<String>, Generation)>,
}

impl IngestedGenerator {
    pub fn new(records: Vec<GenerationRecord>) -> Self {
        Self {
            by_query: records
                .into_iter()
                .map(|r| {
                    let generation = Generation {
                        tokens: TokenSequence::from_texts(&r.generated),
                        truncated: r.truncated,
                    };
                    (r.query_id, (r.context, generation))
                })
                .collect(),
        }
    }
}

impl CloneGenerator for IngestedGenerator {
    /// Fails when the recorded context is not `context`, so generations made
    /// for other windows are never scored against the wrong ground truth.
    fn generate(&self, query_id: u64, context: &TokenSequence) -> Result<Generation, LmError> {
        let (recorded, generation) = self
            .by_query
            .get(&query_id)
            .ok_or(LmError::MissingGeneration(query_id))?;
        if !recorded
            .iter()
            .map(String::as_str)
            .eq(context.iter().map(|t| t.text.as_str()))
        {
            return Err(LmError::ContextMismatch(query_id));
        }
        Ok(generation.clone())
    }
}

/// One line of a generations file. `generated` holds the full output,
/// context included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub query_id: u64,
    pub context: Vec<String>,
    pub generated: Vec<String>,
    pub truncated: bool,
}

impl GenerationRecord {
    pub fn new(query_id: u64, context: &TokenSequence, generation: &Generation) -> Self {
        Self {
            query_id,
            context: context.texts().into_iter().map(str::to_owned).collect(),
            generated: generation
                .tokens
                .texts()
                .into_iter()
                .map(str::to_owned)
                .collect(),
            truncated: generation.truncated,
        }
    }

    pub fn context_tokens(&self) -> TokenSequence {
        TokenSequence::from_texts(&self.context)
    }

    pub fn generated_tokens(&self) -> TokenSequence {
        TokenSequence::from_texts(&self.generated)
    }
}

pub fn write_generations<W: Write>(records: &[GenerationRecord], mut w: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_generations<R: BufRead>(reader: R) -> Result<Vec<GenerationRecord>, LmError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let parse_err = |message: String| LmError::Parse {
            line: i + 1,
            message,
        };
        let line = line.map_err(|e| parse_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

/// Loads a generations file. Marker tokens are passed through as-is.
pub fn ingest_generations(path: &Path) -> Result<Vec<GenerationRecord>, LmError> {
    let file = File::open(path).map_err(|source| LmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_generations(BufReader::new(file))
}

pub fn save_generations(records: &[GenerationRecord], path: &Path) -> Result<(), LmError> {
    let io_err = |source| LmError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    write_generations(records, BufWriter::new(file)).map_err(io_err)
}

const MODEL_FORMAT: &str = "clonerec-ngram";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    order: usize,
    backoff: f64,
    vocabulary: Vec<String>,
    unigram_counts: Vec<u64>,
    contexts: Vec<ContextEntry>,
}

#[derive(Serialize, Deserialize)]
struct ContextEntry {
    context: Vec<TokenId>,
    next: Vec<(TokenId, u64)>,
}

impl NGramModel {
    pub fn write_to<W: Write>(&self, w: W) -> io::Result<()> {
        let mut contexts: Vec<ContextEntry> = self
            .levels
            .iter()
            .flat_map(|level| {
                level.iter().map(|(ctx, cont)| ContextEntry {
                    context: ctx.clone(),
                    next: cont.next.clone(),
                })
            })
            .collect();
        contexts.sort_by(|a, b| {
            a.context
                .len()
                .cmp(&b.context.len())
                .then_with(|| a.context.cmp(&b.context))
        });
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            order: self.order,
            backoff: self.backoff,
            vocabulary: self.vocab.clone(),
            unigram_counts: self.unigrams.clone(),
            contexts,
        };
        serde_json::to_writer(w, &file).map_err(io::Error::other)
    }

    pub fn read_from<R: io::Read>(r: R) -> Result<Self, LmError> {
        let bad = |message: String| LmError::Parse { line: 1, message };
        let file: ModelFile = serde_json::from_reader(r).map_err(|e| LmError::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(bad(format!(
                "unsupported model format {} v{}",
                file.format, file.version
            )));
        }
        if file.order == 0 {
            return Err(bad("order must be >= 1".into()));
        }
        let v = file.vocabulary.len();
        if file.unigram_counts.len() != v {
            return Err(bad("unigram_counts length differs from vocabulary".into()));
        }
        let ids: HashMap<String, TokenId> = file
            .vocabulary
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        if ids.len() != v || META_TOKENS.iter().any(|m| !ids.contains_key(*m)) {
            return Err(bad(
                "vocabulary must be unique and contain all meta-tokens".into()
            ));
        }
        let mut levels = vec![HashMap::new(); file.order - 1];
        for entry in file.contexts {
            let k = entry.context.len();
            if k == 0 || k >= file.order {
                return Err(bad(format!(
                    "context of length {k} for order {}",
                    file.order
                )));
            }
            if entry
                .context
                .iter()
                .chain(entry.next.iter().map(|(id, _)| id))
                .any(|&id| id as usize >= v)
            {
                return Err(bad("token id out of range".into()));
            }
            let total = entry.next.iter().map(|(_, c)| c).sum();
            levels[k - 1].insert(
                entry.context,
                Continuations {
                    total,
                    next: entry.next,
                },
            );
        }
        Ok(Self {
            order: file.order,
            backoff: file.backoff,
            unigram_total: file.unigram_counts.iter().sum(),
            vocab: file.vocabulary,
            ids,
            unigrams: file.unigram_counts,
            levels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        let io_err = |source| LmError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let file = File::open(path).map_err(|source| LmError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_from(BufReader::new(file))
    }
}
