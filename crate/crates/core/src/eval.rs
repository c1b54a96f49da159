//! Evaluation harness: ROUGE-1/2/L, top-k accuracy and MRR under exact and
//! functionality matching, perplexity of generated vs. retrieved methods,
//! and mean ± std aggregation over queries.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;
use std::io::{self, BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{FunctionalityId, RecordId, SearchCorpus};
use crate::lm::{
    perplexity, CloneGenerator, GenerationConfig, LanguageModel, QueryWindow, SamplingGenerator,
};
use crate::retrieval::{extract_clone_span, TfIdfIndex};
use crate::tokenizer::{Token, TokenSequence};

/// Recommendations considered by MRR and the accuracy table.
pub const MRR_CUTOFF: usize = 10;
pub const REPORTED_K: [usize; 4] = [1, 3, 5, 10];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no query results to aggregate")]
    EmptyResultSet,
    #[error("k must be >= 1")]
    InvalidK,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

impl RougeScore {
    /// Ratios with zero denominators are 0, and F is 0 when P + R = 0.
    pub fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        Self::from_pr(
            ratio(overlap, candidate_total),
            ratio(overlap, reference_total),
        )
    }

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f_measure = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f_measure,
        }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N with clipped n-gram overlap.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    assert!(n >= 1, "ROUGE-N needs n >= 1");
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap: usize = cand
        .iter()
        .map(|(g, &c)| refs.get(g).map_or(0, |&r| c.min(r)))
        .sum();
    let total = |len: usize| (len + 1).saturating_sub(n);
    RougeScore::from_counts(overlap, total(candidate.len()), total(reference.len()))
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore::from_counts(
        lcs_len(candidate, reference),
        candidate.len(),
        reference.len(),
    )
}

/// ROUGE-1, ROUGE-2 and ROUGE-L for one candidate/reference pairing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeSet {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

impl RougeSet {
    pub fn compute<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Self {
        Self {
            rouge1: rouge_n(candidate, reference, 1),
            rouge2: rouge_n(candidate, reference, 2),
            rouge_l: rouge_l(candidate, reference),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Same record as the ground truth (token-identical in a deduped corpus).
    Exact,
    /// Same functionality label as the ground truth.
    Functionality,
}

impl Matcher {
    pub const ALL: [Matcher; 2] = [Matcher::Exact, Matcher::Functionality];

    pub fn label(self) -> &'static str {
        match self {
            Matcher::Exact => "exact",
            Matcher::Functionality => "functionality",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub record_id: RecordId,
    pub score: f64,
    pub functionality_id: FunctionalityId,
    pub perplexity: f64,
    /// The generated span as candidate, this recommendation as reference.
    pub rouge_vs_generated: RougeSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: u64,
    pub context: Vec<String>,
    pub generated: Vec<String>,
    pub generated_terminated: bool,
    pub ground_truth_record_id: RecordId,
    pub ground_truth_functionality_id: FunctionalityId,
    pub ground_truth: Vec<String>,
    /// Ranked by descending score, ties by ascending record id.
    pub recommendations: Vec<Recommendation>,
    pub rouge_generated_vs_ground_truth: RougeSet,
    pub perplexity_generated: f64,
    pub perplexity_ground_truth: f64,
}

impl QueryResult {
    pub fn is_match(&self, rec: &Recommendation, matcher: Matcher) -> bool {
        match matcher {
            Matcher::Exact => rec.record_id == self.ground_truth_record_id,
            Matcher::Functionality => rec.functionality_id == self.ground_truth_functionality_id,
        }
    }

    /// 1-based rank of the first matching recommendation within the first
    /// `cutoff` positions.
    pub fn first_match_rank(&self, matcher: Matcher, cutoff: usize) -> Option<usize> {
        self.recommendations
            .iter()
            .take(cutoff)
            .position(|r| self.is_match(r, matcher))
            .map(|i| i + 1)
    }
}

/// Fraction of queries with a match in the top `k`.
pub fn top_k_accuracy(
    results: &[QueryResult],
    k: usize,
    matcher: Matcher,
) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if results.is_empty() {
        return Err(EvalError::EmptyResultSet);
    }
    let hits = results
        .iter()
        .filter(|r| r.first_match_rank(matcher, k).is_some())
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Mean reciprocal rank of the first match in the top 10 (0 when absent).
pub fn mrr(results: &[QueryResult], matcher: Matcher) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResultSet);
    }
    let sum: f64 = results
        .iter()
        .map(|r| {
            r.first_match_rank(matcher, MRR_CUTOFF)
                .map_or(0.0, |rank| 1.0 / rank as f64)
        })
        .sum();
    Ok(sum / results.len() as f64)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RougeAggregate {
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f_measure: MeanStd,
}

impl RougeAggregate {
    fn of(scores: &[RougeScore]) -> Option<Self> {
        let col = |f: fn(&RougeScore) -> f64| scores.iter().map(f).collect::<Vec<_>>();
        Some(Self {
            precision: MeanStd::of(&col(|s| s.precision))?,
            recall: MeanStd::of(&col(|s| s.recall))?,
            f_measure: MeanStd::of(&col(|s| s.f_measure))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RougeGroup {
    pub label: String,
    pub rouge1: RougeAggregate,
    pub rouge2: RougeAggregate,
    pub rouge_l: RougeAggregate,
}

impl RougeGroup {
    fn of(label: &str, sets: &[RougeSet]) -> Option<Self> {
        let pick = |f: fn(&RougeSet) -> RougeScore| sets.iter().map(f).collect::<Vec<_>>();
        Some(Self {
            label: label.to_string(),
            rouge1: RougeAggregate::of(&pick(|s| s.rouge1))?,
            rouge2: RougeAggregate::of(&pick(|s| s.rouge2))?,
            rouge_l: RougeAggregate::of(&pick(|s| s.rouge_l))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityRow {
    pub label: String,
    pub stats: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub matcher: Matcher,
    /// (k, accuracy) for k in [`REPORTED_K`]
    pub top_k: Vec<(usize, f64)>,
    pub mrr: f64,
}

impl AccuracyRow {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.top_k.iter().find(|(kk, _)| *kk == k).map(|(_, a)| *a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub num_queries: usize,
    pub num_failures: usize,
    pub perplexity: Vec<PerplexityRow>,
    pub rouge: Vec<RougeGroup>,
    pub accuracy: Vec<AccuracyRow>,
}

/// Recomputes every aggregate from per-query rows.
pub fn summarize(results: &[QueryResult], num_failures: usize) -> Summary {
    let mut perplexity_rows = Vec::new();
    let mut push_ppl = |label: String, values: Vec<f64>| {
        if let Some(stats) = MeanStd::of(&values) {
            perplexity_rows.push(PerplexityRow { label, stats });
        }
    };
    push_ppl(
        "Generated".into(),
        results.iter().map(|r| r.perplexity_generated).collect(),
    );
    push_ppl(
        "GT".into(),
        results.iter().map(|r| r.perplexity_ground_truth).collect(),
    );
    for rank in 1..=MRR_CUTOFF {
        push_ppl(
            format!("Top-{rank}"),
            results
                .iter()
                .filter_map(|r| r.recommendations.get(rank - 1).map(|x| x.perplexity))
                .collect(),
        );
    }

    let ranks = |lo: usize, hi: usize| -> Vec<RougeSet> {
        results
            .iter()
            .flat_map(|r| {
                r.recommendations
                    .iter()
                    .enumerate()
                    .filter(move |(i, _)| (lo..=hi).contains(&(i + 1)))
                    .map(|(_, rec)| rec.rouge_vs_generated)
            })
            .collect()
    };
    let generated_vs_gt: Vec<RougeSet> = results
        .iter()
        .map(|r| r.rouge_generated_vs_ground_truth)
        .collect();
    let rouge = [
        RougeGroup::of("Generated vs GT", &generated_vs_gt),
        RougeGroup::of("Top-1 vs Generated", &ranks(1, 1)),
        RougeGroup::of("Top(2-4) vs Generated", &ranks(2, 4)),
        RougeGroup::of("Top(5-10) vs Generated", &ranks(5, 10)),
    ]
    .into_iter()
    .flatten()
    .collect();

    let accuracy = if results.is_empty() {
        Vec::new()
    } else {
        Matcher::ALL
            .iter()
            .map(|&matcher| AccuracyRow {
                matcher,
                top_k: REPORTED_K
                    .iter()
                    .map(|&k| (k, top_k_accuracy(results, k, matcher).expect("non-empty")))
                    .collect(),
                mrr: mrr(results, matcher).expect("non-empty"),
            })
            .collect()
    };

    Summary {
        num_queries: results.len(),
        num_failures,
        perplexity: perplexity_rows,
        rouge,
        accuracy,
    }
}

/// A context window plus the clone that actually followed it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub query_id: u64,
    pub window: QueryWindow,
    pub ground_truth: TokenSequence,
}

/// Windows of `window_len` containing `<soc>`, numbered in stream order. The
/// ground truth of each is the clone starting at the window's last `<soc>`.
pub fn build_queries(stream: &[Token], window_len: usize) -> Vec<EvalQuery> {
    crate::lm::extract_query_windows(stream, window_len)
        .into_iter()
        .enumerate()
        .map(|(i, window)| {
            let start = window.offset + window.anchor();
            let ground_truth = extract_clone_span(&stream[start..])
                .expect("window anchor is a <soc>")
                .tokens;
            EvalQuery {
                query_id: i as u64,
                window,
                ground_truth,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub query_id: u64,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub generation: GenerationConfig,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            generation: GenerationConfig::default(),
            top_k: MRR_CUTOFF,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub results: Vec<QueryResult>,
    pub failures: Vec<QueryFailure>,
    pub summary: Summary,
}

/// Generate with the reference model, then retrieve and score.
pub fn evaluate_pipeline<M: LanguageModel + Sync>(
    model: &M,
    corpus: &SearchCorpus,
    index: &TfIdfIndex,
    queries: &[EvalQuery],
    config: &EvalConfig,
) -> EvalReport {
    let generator = SamplingGenerator {
        model,
        config: config.generation.clone(),
    };
    evaluate_with_generator(&generator, model, corpus, index, queries, config.top_k)
}

/// Same as [`evaluate_pipeline`] with predictions from any generator;
/// `scorer` supplies perplexities.
pub fn evaluate_with_generator<G, M>(
    generator: &G,
    scorer: &M,
    corpus: &SearchCorpus,
    index: &TfIdfIndex,
    queries: &[EvalQuery],
    top_k: usize,
) -> EvalReport
where
    G: CloneGenerator + ?Sized,
    M: LanguageModel + Sync,
{
    let outcomes: Vec<Result<QueryResult, QueryFailure>> = queries
        .par_iter()
        .map(|q| evaluate_query(generator, scorer, corpus, index, q, top_k))
        .collect();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => results.push(r),
            Err(f) => failures.push(f),
        }
    }
    results.sort_by_key(|r| r.query_id);
    failures.sort_by_key(|f| f.query_id);
    let summary = summarize(&results, failures.len());
    EvalReport {
        results,
        failures,
        summary,
    }
}

fn evaluate_query<G, M>(
    generator: &G,
    scorer: &M,
    corpus: &SearchCorpus,
    index: &TfIdfIndex,
    query: &EvalQuery,
    top_k: usize,
) -> Result<QueryResult, QueryFailure>
where
    G: CloneGenerator + ?Sized,
    M: LanguageModel,
{
    let fail = |stage: &str, message: String| QueryFailure {
        query_id: query.query_id,
        stage: stage.to_string(),
        message,
    };
    let context = &query.window.tokens;
    let ground_truth = corpus
        .find_by_tokens(&query.ground_truth.texts())
        .ok_or_else(|| {
            fail(
                "ground_truth",
                "ground-truth method is not in the corpus".into(),
            )
        })?;
    let generation = generator
        .generate(query.query_id, context)
        .map_err(|e| fail("generate", e.to_string()))?;

    // the predicted clone starts at the same <soc> as the ground truth
    let generated = &generation.tokens;
    let from = if generated.starts_with(context) {
        query.window.anchor()
    } else {
        0
    };
    let span =
        extract_clone_span(&generated[from..]).map_err(|e| fail("extract", e.to_string()))?;
    let span_texts = span.tokens.texts();

    let ppl =
        |texts: &[&str]| perplexity(scorer, texts).map_err(|e| fail("perplexity", e.to_string()));
    let gt_texts = ground_truth.tokens.texts();

    let recommendations = index
        .rank_tokens(&span_texts, top_k)
        .into_iter()
        .map(|ranked| {
            let rec = corpus.get(ranked.record_id).ok_or_else(|| {
                fail(
                    "retrieve",
                    format!(
                        "index returned record {} missing from corpus",
                        ranked.record_id
                    ),
                )
            })?;
            let rec_texts = rec.tokens.texts();
            Ok(Recommendation {
                record_id: rec.record_id,
                score: ranked.score,
                functionality_id: rec.functionality_id,
                perplexity: ppl(&rec_texts)?,
                rouge_vs_generated: RougeSet::compute(&span_texts, &rec_texts),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(QueryResult {
        query_id: query.query_id,
        context: owned(&context.texts()),
        perplexity_generated: ppl(&span_texts)?,
        perplexity_ground_truth: ppl(&gt_texts)?,
        rouge_generated_vs_ground_truth: RougeSet::compute(&span_texts, &gt_texts),
        generated: owned(&span_texts),
        generated_terminated: span.terminated,
        ground_truth_record_id: ground_truth.record_id,
        ground_truth_functionality_id: ground_truth.functionality_id,
        ground_truth: owned(&gt_texts),
        recommendations,
    })
}

fn owned(texts: &[&str]) -> Vec<String> {
    texts.iter().map(|t| t.to_string()).collect()
}

pub fn write_rows<W: Write>(results: &[QueryResult], mut w: W) -> io::Result<()> {
    for r in results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_rows<R: BufRead>(reader: R) -> io::Result<Vec<QueryResult>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?);
    }
    Ok(out)
}

pub fn write_failures<W: Write>(failures: &[QueryFailure], mut w: W) -> io::Result<()> {
    for f in failures {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

fn pm(m: &MeanStd) -> String {
    format!("{:.3} ± {:.3}", m.mean, m.std)
}

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| -> String {
        cells
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let _ = writeln!(out, "{}", line(&mut header.iter().copied()));
    let _ = writeln!(
        out,
        "{}",
        widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("  ")
    );
    for row in rows {
        let _ = writeln!(out, "{}", line(&mut row.iter().map(String::as_str)));
    }
}

/// Plain-text tables: ROUGE by pairing, perplexity by position, and
/// top-k accuracy / MRR by matcher.
pub fn render_summary(summary: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "queries: {}  failures: {}\n",
        summary.num_queries, summary.num_failures
    );

    let _ = writeln!(out, "ROUGE (mean ± std)");
    let mut rows = Vec::new();
    for g in &summary.rouge {
        for (metric, agg) in [
            ("ROUGE-1", &g.rouge1),
            ("ROUGE-2", &g.rouge2),
            ("ROUGE-L", &g.rouge_l),
        ] {
            rows.push(vec![
                g.label.clone(),
                metric.to_string(),
                pm(&agg.precision),
                pm(&agg.recall),
                pm(&agg.f_measure),
            ]);
        }
    }
    table(&mut out, &["Pairing", "Metric", "P", "R", "F"], &rows);

    let _ = writeln!(out, "\nPerplexity (mean ± std)");
    let rows: Vec<Vec<String>> = summary
        .perplexity
        .iter()
        .map(|r| vec![r.label.clone(), pm(&r.stats), r.stats.count.to_string()])
        .collect();
    table(&mut out, &["Position", "Perplexity", "N"], &rows);

    let _ = writeln!(out, "\nTop-k accuracy and MRR");
    let mut header = vec!["Matcher".to_string()];
    header.extend(REPORTED_K.iter().map(|k| format!("Top-{k}")));
    header.push("MRR".into());
    let rows: Vec<Vec<String>> = summary
        .accuracy
        .iter()
        .map(|a| {
            let mut row = vec![a.matcher.label().to_string()];
            row.extend(a.top_k.iter().map(|(_, v)| format!("{v:.3}")));
            row.push(format!("{:.3}", a.mrr));
            row
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    table(&mut out, &header_refs, &rows);
    out
}
