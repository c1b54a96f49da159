//! TF-IDF retrieval over the search corpus.
//!
//! Terms are unigram token texts. A term `i` in document `j` weighs
//! `(1 + ln TF(i, j)) * ln(J / DF(i))`, and every document vector is
//! L2-normalized, so a dot product with a normalized query is its cosine
//! similarity. Scoring walks term-major postings and only touches the
//! query's terms.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{RecordId, SearchCorpus};
use crate::tokenizer::{Token, TokenSequence, END_OF_CLONE, START_OF_CLONE};

pub type TermId = u32;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot fit an index on an empty corpus")]
    EmptyCorpus,
    #[error("duplicate record_id {0}")]
    DuplicateRecordId(RecordId),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpanError {
    #[error("no <soc> marker in generated output")]
    MissingStartMarker,
}

/// Sorted `(term, weight)` pairs; zero weights are never stored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    entries: Vec<(TermId, f64)>,
    normalized: bool,
}

impl SparseVector {
    /// Builds a vector from pairs sorted by strictly increasing term id.
    pub fn from_sorted(entries: Vec<(TermId, f64)>, normalized: bool) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        debug_assert!(entries.iter().all(|&(_, w)| w >= 0.0));
        Self {
            entries,
            normalized,
        }
    }

    pub fn entries(&self) -> &[(TermId, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, term: TermId) -> f64 {
        self.entries
            .binary_search_by_key(&term, |&(t, _)| t)
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w * w).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.entries.len() && j < other.entries.len() {
            let (a, b) = (self.entries[i], other.entries[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a.1 * b.1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

/// `(1 + ln tf) * ln(J / df)`.
pub fn tfidf_weight(tf: u32, df: u32, num_docs: usize) -> f64 {
    (1.0 + f64::from(tf).ln()) * (num_docs as f64 / f64::from(df)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub record_id: RecordId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfIdfIndex {
    terms: Vec<String>,
    term_ids: HashMap<String, TermId>,
    df: Vec<u32>,
    record_ids: Vec<RecordId>,
    doc_vectors: Vec<SparseVector>,
    /// term -> (document position, weight), ascending position
    postings: Vec<Vec<(u32, f64)>>,
}

impl TfIdfIndex {
    pub fn fit(corpus: &SearchCorpus) -> Result<Self, RetrievalError> {
        Self::from_documents(
            corpus
                .records()
                .iter()
                .map(|r| (r.record_id, r.tokens.texts())),
        )
    }

    /// Fits over arbitrary `(record_id, tokens)` documents. Term ids follow
    /// the lexicographic order of term texts.
    pub fn from_documents<I, D, S>(docs: I) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = (RecordId, D)>,
        D: AsRef<[S]>,
        S: AsRef<str>,
    {
        let docs: Vec<(RecordId, Vec<String>)> = docs
            .into_iter()
            .map(|(id, d)| {
                (
                    id,
                    d.as_ref().iter().map(|s| s.as_ref().to_owned()).collect(),
                )
            })
            .collect();
        if docs.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut seen = HashMap::with_capacity(docs.len());
        for (id, _) in &docs {
            if seen.insert(*id, ()).is_some() {
                return Err(RetrievalError::DuplicateRecordId(*id));
            }
        }

        let mut df_by_text: BTreeMap<&str, u32> = BTreeMap::new();
        for (_, tokens) in &docs {
            let mut distinct: Vec<&str> = tokens.iter().map(String::as_str).collect();
            distinct.sort_unstable();
            distinct.dedup();
            for t in distinct {
                *df_by_text.entry(t).or_default() += 1;
            }
        }
        let terms: Vec<String> = df_by_text.keys().map(|t| t.to_string()).collect();
        let df: Vec<u32> = df_by_text.values().copied().collect();
        let term_ids: HashMap<String, TermId> = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TermId))
            .collect();

        let mut index = Self {
            terms,
            term_ids,
            df,
            record_ids: docs.iter().map(|(id, _)| *id).collect(),
            doc_vectors: Vec::with_capacity(docs.len()),
            postings: Vec::new(),
        };
        index.doc_vectors = docs
            .iter()
            .map(|(_, tokens)| index.vectorize_query(tokens))
            .collect();
        index.build_postings();
        Ok(index)
    }

    fn build_postings(&mut self) {
        self.postings = vec![Vec::new(); self.terms.len()];
        for (pos, vec) in self.doc_vectors.iter().enumerate() {
            for &(term, w) in vec.entries() {
                self.postings[term as usize].push((pos as u32, w));
            }
        }
    }

    pub fn num_docs(&self) -> usize {
        self.record_ids.len()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn term_id(&self, text: &str) -> Option<TermId> {
        self.term_ids.get(text).copied()
    }

    pub fn document_frequency(&self, term: TermId) -> u32 {
        self.df[term as usize]
    }

    pub fn record_ids(&self) -> &[RecordId] {
        &self.record_ids
    }

    pub fn doc_vectors(&self) -> &[SparseVector] {
        &self.doc_vectors
    }

    pub fn position(&self, record_id: RecordId) -> Option<usize> {
        self.record_ids.iter().position(|&r| r == record_id)
    }

    /// Normalized TF-IDF vector of `tokens` under the corpus statistics.
    /// Tokens missing from the term dictionary are dropped.
    pub fn vectorize_query<S: AsRef<str>>(&self, tokens: &[S]) -> SparseVector {
        let mut tf: BTreeMap<TermId, u32> = BTreeMap::new();
        for t in tokens {
            if let Some(id) = self.term_id(t.as_ref()) {
                *tf.entry(id).or_default() += 1;
            }
        }
        let j = self.num_docs();
        let raw: Vec<(TermId, f64)> = tf
            .into_iter()
            .map(|(term, count)| (term, tfidf_weight(count, self.df[term as usize], j)))
            .filter(|&(_, w)| w > 0.0)
            .collect();
        let norm = raw.iter().map(|&(_, w)| w * w).sum::<f64>().sqrt();
        let entries = if norm > 0.0 {
            raw.into_iter().map(|(t, w)| (t, w / norm)).collect()
        } else {
            Vec::new()
        };
        SparseVector::from_sorted(entries, true)
    }

    /// Cosine score of every document, in document order.
    pub fn scores(&self, query: &SparseVector) -> Vec<f64> {
        let mut scores = vec![0.0; self.num_docs()];
        for &(term, qw) in query.entries() {
            let Some(list) = self.postings.get(term as usize) else {
                continue;
            };
            for &(pos, dw) in list {
                scores[pos as usize] += qw * dw;
            }
        }
        for s in scores.iter_mut() {
            *s = s.clamp(0.0, 1.0);
        }
        scores
    }

    /// Top `k` documents by descending score, ties by ascending record id.
    pub fn rank(&self, query: &SparseVector, k: usize) -> Vec<Ranked> {
        let scores = self.scores(query);
        let mut order: Vec<usize> = (0..scores.len()).collect();
        let cmp = |&a: &usize, &b: &usize| {
            scores[b]
                .total_cmp(&scores[a])
                .then(self.record_ids[a].cmp(&self.record_ids[b]))
        };
        let k = k.min(order.len());
        if k == 0 {
            return Vec::new();
        }
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_by(cmp);
        order
            .into_iter()
            .map(|pos| Ranked {
                record_id: self.record_ids[pos],
                score: scores[pos],
            })
            .collect()
    }

    pub fn rank_tokens<S: AsRef<str>>(&self, tokens: &[S], k: usize) -> Vec<Ranked> {
        self.rank(&self.vectorize_query(tokens), k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloneSpan {
    pub tokens: TokenSequence,
    /// False when no `<eoc>` followed the `<soc>`.
    pub terminated: bool,
}

/// The tokens from the first `<soc>` through the first `<eoc>` after it,
/// inclusive; to the end of input when there is no such `<eoc>`.
pub fn extract_clone_span(generated: &[Token]) -> Result<CloneSpan, SpanError> {
    let start = generated
        .iter()
        .position(|t| t.is(START_OF_CLONE))
        .ok_or(SpanError::MissingStartMarker)?;
    match generated[start..].iter().position(|t| t.is(END_OF_CLONE)) {
        Some(len) => Ok(CloneSpan {
            tokens: generated[start..=start + len].to_vec().into(),
            terminated: true,
        }),
        None => Ok(CloneSpan {
            tokens: generated[start..].to_vec().into(),
            terminated: false,
        }),
    }
}

const SNAPSHOT_FORMAT: &str = "clonerec-tfidf";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    format: String,
    version: u32,
    num_docs: usize,
    num_terms: usize,
}

#[derive(Serialize, Deserialize)]
struct SnapshotTerm {
    term: String,
    df: u32,
}

#[derive(Serialize, Deserialize)]
struct SnapshotDoc {
    record_id: RecordId,
    vector: Vec<(TermId, f64)>,
}

impl TfIdfIndex {
    /// Line-delimited snapshot: a header line, one line per term, then one
    /// line per document vector. Refitting the same corpus writes the same
    /// bytes.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header = SnapshotHeader {
            format: SNAPSHOT_FORMAT.into(),
            version: SNAPSHOT_VERSION,
            num_docs: self.num_docs(),
            num_terms: self.num_terms(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (term, &df) in self.terms.iter().zip(&self.df) {
            serde_json::to_writer(
                &mut w,
                &SnapshotTerm {
                    term: term.clone(),
                    df,
                },
            )?;
            w.write_all(b"\n")?;
        }
        for (&record_id, vec) in self.record_ids.iter().zip(&self.doc_vectors) {
            serde_json::to_writer(
                &mut w,
                &SnapshotDoc {
                    record_id,
                    vector: vec.entries().to_vec(),
                },
            )?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn read_snapshot<R: BufRead>(reader: R) -> Result<Self, RetrievalError> {
        let mut lines = reader.lines().enumerate();
        let mut next_line = |what: &str| -> Result<(usize, String), RetrievalError> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(RetrievalError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                }),
                None => Err(RetrievalError::Parse {
                    line: 0,
                    message: format!("unexpected end of snapshot, expected {what}"),
                }),
            }
        };
        fn parse<T: for<'de> Deserialize<'de>>(line: usize, s: &str) -> Result<T, RetrievalError> {
            serde_json::from_str(s).map_err(|e| RetrievalError::Parse {
                line,
                message: e.to_string(),
            })
        }

        let (n, l) = next_line("header")?;
        let header: SnapshotHeader = parse(n, &l)?;
        if header.format != SNAPSHOT_FORMAT || header.version != SNAPSHOT_VERSION {
            return Err(RetrievalError::Parse {
                line: n,
                message: format!("unsupported snapshot {} v{}", header.format, header.version),
            });
        }
        if header.num_docs == 0 {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut terms = Vec::with_capacity(header.num_terms);
        let mut df = Vec::with_capacity(header.num_terms);
        for _ in 0..header.num_terms {
            let (n, l) = next_line("term")?;
            let t: SnapshotTerm = parse(n, &l)?;
            if t.df == 0 || t.df as usize > header.num_docs {
                return Err(RetrievalError::Parse {
                    line: n,
                    message: format!("df {} outside 1..={}", t.df, header.num_docs),
                });
            }
            if terms.last().is_some_and(|prev: &String| *prev >= t.term) {
                return Err(RetrievalError::Parse {
                    line: n,
                    message: "terms must be strictly increasing".into(),
                });
            }
            terms.push(t.term);
            df.push(t.df);
        }
        let mut record_ids = Vec::with_capacity(header.num_docs);
        let mut doc_vectors = Vec::with_capacity(header.num_docs);
        let mut seen = HashMap::new();
        for _ in 0..header.num_docs {
            let (n, l) = next_line("document")?;
            let d: SnapshotDoc = parse(n, &l)?;
            let bad = |message: &str| RetrievalError::Parse {
                line: n,
                message: message.into(),
            };
            if seen.insert(d.record_id, ()).is_some() {
                return Err(bad("duplicate record_id"));
            }
            if !d.vector.windows(2).all(|w| w[0].0 < w[1].0)
                || d.vector
                    .iter()
                    .any(|&(t, w)| t as usize >= terms.len() || w.is_nan() || w <= 0.0)
            {
                return Err(bad(
                    "vector terms must be increasing, in range, with positive weights",
                ));
            }
            record_ids.push(d.record_id);
            doc_vectors.push(SparseVector::from_sorted(d.vector, true));
        }
        if let Some((n, _)) = lines.find(|(_, l)| !l.as_ref().is_ok_and(|l| l.trim().is_empty())) {
            return Err(RetrievalError::Parse {
                line: n + 1,
                message: "trailing data after last document".into(),
            });
        }
        let term_ids = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TermId))
            .collect();
        let mut index = Self {
            terms,
            term_ids,
            df,
            record_ids,
            doc_vectors,
            postings: Vec::new(),
        };
        index.build_postings();
        Ok(index)
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<(), RetrievalError> {
        let io_err = |source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = File::create(path).map_err(io_err)?;
        self.write_snapshot(BufWriter::new(file)).map_err(io_err)
    }

    pub fn load_snapshot(path: &Path) -> Result<Self, RetrievalError> {
        let file = File::open(path).map_err(|source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_snapshot(BufReader::new(file))
    }
}
