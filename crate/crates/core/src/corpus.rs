//! The search corpus: real clone methods traced from a reference table,
//! tokenized, normalized, marked, and deduplicated by token sequence.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Component, Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tokenizer::{tokenize_method, LexOptions, TokenSequence};

pub type RecordId = u64;
pub type FunctionalityId = u32;

/// Where a clone method lives in the source tree. Lines are 1-based and
/// inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CloneReference {
    pub record_id: RecordId,
    pub functionality_id: FunctionalityId,
    pub file_path: String,
    pub start_line: usize,
    pub end_line: usize,
}

impl CloneReference {
    pub fn validate(&self) -> Result<(), String> {
        if self.file_path.is_empty() {
            return Err("empty file_path".into());
        }
        if self.start_line == 0 {
            return Err("start_line must be >= 1".into());
        }
        if self.start_line > self.end_line {
            return Err(format!(
                "start_line {} > end_line {}",
                self.start_line, self.end_line
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloneMethodRecord {
    pub record_id: RecordId,
    pub functionality_id: FunctionalityId,
    pub source_ref: CloneReference,
    /// Marked, normalized tokens.
    pub tokens: TokenSequence,
    pub dedupe_key: String,
}

impl CloneMethodRecord {
    pub fn new(source_ref: CloneReference, tokens: TokenSequence) -> Self {
        let dedupe_key = dedupe_key(&tokens);
        Self {
            record_id: source_ref.record_id,
            functionality_id: source_ref.functionality_id,
            source_ref,
            tokens,
            dedupe_key,
        }
    }
}

/// SHA-256 over the length-prefixed token texts, hex encoded.
pub fn dedupe_key<S: AsRef<str>>(texts: &[S]) -> String {
    let mut hasher = Sha256::new();
    for t in texts {
        let bytes = t.as_ref().as_bytes();
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate record_id {0}")]
    DuplicateRecordId(RecordId),
    #[error("records {kept} and {dropped} have identical token sequences")]
    DuplicateTokens { kept: RecordId, dropped: RecordId },
    #[error("record {0} is not a marked clone (must start with <soc> and end with <eoc>)")]
    NotMarked(RecordId),
}

impl CorpusError {
    fn io(path: &Path, source: io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Deduplicated, ordered collection of clone methods. Immutable once built.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchCorpus {
    records: Vec<CloneMethodRecord>,
    by_id: HashMap<RecordId, usize>,
    by_key: HashMap<String, RecordId>,
}

impl SearchCorpus {
    /// Builds a corpus from already-tokenized records, checking every
    /// invariant. Records are reordered by ascending `record_id`.
    pub fn from_records(mut records: Vec<CloneMethodRecord>) -> Result<Self, CorpusError> {
        records.sort_by_key(|r| r.record_id);
        let mut by_id = HashMap::with_capacity(records.len());
        let mut by_key = HashMap::with_capacity(records.len());
        for (pos, rec) in records.iter().enumerate() {
            if !rec.tokens.is_marked_clone() {
                return Err(CorpusError::NotMarked(rec.record_id));
            }
            if by_id.insert(rec.record_id, pos).is_some() {
                return Err(CorpusError::DuplicateRecordId(rec.record_id));
            }
            if let Some(&kept) = by_key.get(&rec.dedupe_key) {
                return Err(CorpusError::DuplicateTokens {
                    kept,
                    dropped: rec.record_id,
                });
            }
            by_key.insert(rec.dedupe_key.clone(), rec.record_id);
        }
        Ok(Self {
            records,
            by_id,
            by_key,
        })
    }

    pub fn records(&self) -> &[CloneMethodRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, record_id: RecordId) -> Option<&CloneMethodRecord> {
        self.by_id.get(&record_id).map(|&i| &self.records[i])
    }

    pub fn position(&self, record_id: RecordId) -> Option<usize> {
        self.by_id.get(&record_id).copied()
    }

    pub fn record_for_key(&self, key: &str) -> Option<&CloneMethodRecord> {
        self.by_key.get(key).and_then(|id| self.get(*id))
    }

    /// Looks up the record whose token texts equal `texts` exactly.
    pub fn find_by_tokens<S: AsRef<str>>(&self, texts: &[S]) -> Option<&CloneMethodRecord> {
        self.record_for_key(&dedupe_key(texts))
    }
}

/// Reads a header-bearing CSV reference table with columns
/// `record_id,functionality_id,file_path,start_line,end_line`.
pub fn read_reference_table(path: &Path) -> Result<Vec<CloneReference>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    parse_reference_table(file)
}

pub fn parse_reference_table<R: Read>(reader: R) -> Result<Vec<CloneReference>, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut refs: Vec<CloneReference> = Vec::new();
    let mut seen = HashMap::new();
    for (i, row) in rdr.deserialize::<CloneReference>().enumerate() {
        // header is line 1
        let line = i + 2;
        let reference = row.map_err(|e| CorpusError::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(line),
            message: e.to_string(),
        })?;
        reference
            .validate()
            .map_err(|message| CorpusError::Parse { line, message })?;
        if seen.insert(reference.record_id, line).is_some() {
            return Err(CorpusError::Parse {
                line,
                message: format!("duplicate record_id {}", reference.record_id),
            });
        }
        refs.push(reference);
    }
    Ok(refs)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("record {}: file not found: {}", .0.record_id, .0.file_path)]
    FileNotFound(CloneReference),
    #[error("record {}: lines {}..{} out of bounds ({} lines in {})",
        .reference.record_id, .reference.start_line, .reference.end_line, .line_count, .reference.file_path)]
    LineRangeOutOfBounds {
        reference: CloneReference,
        line_count: usize,
    },
    #[error("record {}: invalid reference: {}", .reference.record_id, .message)]
    InvalidReference {
        reference: CloneReference,
        message: String,
    },
}

impl ExtractError {
    pub fn reference(&self) -> &CloneReference {
        match self {
            ExtractError::FileNotFound(r) => r,
            ExtractError::LineRangeOutOfBounds { reference, .. }
            | ExtractError::InvalidReference { reference, .. } => reference,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ExtractError::FileNotFound(_) => "FileNotFound",
            ExtractError::LineRangeOutOfBounds { .. } => "LineRangeOutOfBounds",
            ExtractError::InvalidReference { .. } => "InvalidReference",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedMethod {
    pub text: String,
    pub reference: CloneReference,
}

#[derive(Debug, Default)]
pub struct Extraction {
    pub methods: Vec<ExtractedMethod>,
    pub failures: Vec<ExtractError>,
}

/// Slices each referenced line range out of the files under `source_root`.
/// Failures are collected and extraction carries on.
pub fn extract(references: &[CloneReference], source_root: &Path) -> Extraction {
    let mut files: HashMap<&str, Option<Vec<String>>> = HashMap::new();
    let mut out = Extraction::default();
    for reference in references {
        if let Err(message) = reference.validate() {
            out.failures.push(ExtractError::InvalidReference {
                reference: reference.clone(),
                message,
            });
            continue;
        }
        let relative = Path::new(&reference.file_path);
        if !relative
            .components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
        {
            out.failures.push(ExtractError::InvalidReference {
                reference: reference.clone(),
                message: "file_path must be relative and stay under the source root".into(),
            });
            continue;
        }
        let lines = files
            .entry(reference.file_path.as_str())
            .or_insert_with(|| {
                std::fs::read(source_root.join(relative)).ok().map(|bytes| {
                    String::from_utf8_lossy(&bytes)
                        .lines()
                        .map(str::to_owned)
                        .collect()
                })
            });
        let Some(lines) = lines else {
            out.failures
                .push(ExtractError::FileNotFound(reference.clone()));
            continue;
        };
        if reference.end_line > lines.len() {
            out.failures.push(ExtractError::LineRangeOutOfBounds {
                reference: reference.clone(),
                line_count: lines.len(),
            });
            continue;
        }
        out.methods.push(ExtractedMethod {
            text: lines[reference.start_line - 1..reference.end_line].join("\n"),
            reference: reference.clone(),
        });
    }
    out
}

/// One record left out of the corpus, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub record_id: RecordId,
    pub error_kind: String,
    pub message: String,
}

impl From<&ExtractError> for SkippedRecord {
    fn from(e: &ExtractError) -> Self {
        Self {
            record_id: e.reference().record_id,
            error_kind: e.kind_name().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Default)]
pub struct CorpusBuild {
    pub corpus: SearchCorpus,
    pub skipped: Vec<SkippedRecord>,
    /// Records collapsed into an identical earlier record: (dropped, kept).
    pub collapsed: Vec<(RecordId, RecordId)>,
}

/// Lexes, normalizes and marks every method, then collapses duplicates onto
/// the lowest `record_id`. Input order does not matter.
pub fn build_corpus(extracted: &[ExtractedMethod], options: LexOptions) -> CorpusBuild {
    let mut sorted: Vec<&ExtractedMethod> = extracted.iter().collect();
    sorted.sort_by_key(|m| m.reference.record_id);

    let tokenized: Vec<_> = sorted
        .par_iter()
        .map(|m| (m, tokenize_method(&m.text, options)))
        .collect();

    let mut build = CorpusBuild::default();
    let mut records = Vec::with_capacity(tokenized.len());
    let mut by_key: HashMap<String, RecordId> = HashMap::new();
    let mut last_id = None;
    for (method, result) in tokenized {
        let id = method.reference.record_id;
        if last_id == Some(id) {
            build.skipped.push(SkippedRecord {
                record_id: id,
                error_kind: "DuplicateRecordId".into(),
                message: format!("record_id {id} appears more than once"),
            });
            continue;
        }
        last_id = Some(id);
        match result {
            Ok(tokens) => {
                let record = CloneMethodRecord::new(method.reference.clone(), tokens);
                if let Some(&kept) = by_key.get(&record.dedupe_key) {
                    build.collapsed.push((id, kept));
                } else {
                    by_key.insert(record.dedupe_key.clone(), id);
                    records.push(record);
                }
            }
            Err(e) => build.skipped.push(SkippedRecord {
                record_id: id,
                error_kind: e.kind_name().to_string(),
                message: e.to_string(),
            }),
        }
    }
    build.corpus =
        SearchCorpus::from_records(records).expect("records are unique and marked by construction");
    build
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    record_id: RecordId,
    functionality_id: FunctionalityId,
    file_path: String,
    start_line: usize,
    end_line: usize,
    tokens: Vec<String>,
}

pub fn write_corpus<W: Write>(corpus: &SearchCorpus, mut w: W) -> io::Result<()> {
    for rec in corpus.records() {
        let line = CorpusLine {
            record_id: rec.record_id,
            functionality_id: rec.functionality_id,
            file_path: rec.source_ref.file_path.clone(),
            start_line: rec.source_ref.start_line,
            end_line: rec.source_ref.end_line,
            tokens: rec.tokens.texts().into_iter().map(str::to_owned).collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_corpus(corpus: &SearchCorpus, path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    write_corpus(corpus, BufWriter::new(file)).map_err(|e| CorpusError::io(path, e))
}

pub fn read_corpus<R: BufRead>(reader: R) -> Result<SearchCorpus, CorpusError> {
    let mut records = Vec::new();
    let mut line_of: HashMap<RecordId, usize> = HashMap::new();
    let mut key_of: HashMap<String, RecordId> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| CorpusError::Parse {
            line: line_no,
            message,
        };
        let raw: CorpusLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let reference = CloneReference {
            record_id: raw.record_id,
            functionality_id: raw.functionality_id,
            file_path: raw.file_path,
            start_line: raw.start_line,
            end_line: raw.end_line,
        };
        reference.validate().map_err(parse_err)?;
        let tokens = TokenSequence::from_texts(&raw.tokens);
        if !tokens.is_marked_clone() {
            return Err(parse_err(format!(
                "record {} is not a marked clone",
                raw.record_id
            )));
        }
        if let Some(prev) = line_of.insert(raw.record_id, line_no) {
            return Err(parse_err(format!(
                "record_id {} already defined on line {prev}",
                raw.record_id
            )));
        }
        let record = CloneMethodRecord::new(reference, tokens);
        if let Some(kept) = key_of.insert(record.dedupe_key.clone(), record.record_id) {
            return Err(parse_err(format!(
                "record {} duplicates the tokens of record {kept}",
                record.record_id
            )));
        }
        records.push(record);
    }
    Ok(SearchCorpus::from_records(records).expect("validated line by line"))
}

pub fn load_corpus(path: &Path) -> Result<SearchCorpus, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    read_corpus(BufReader::new(file))
}

pub fn write_skipped_report<W: Write>(skipped: &[SkippedRecord], mut w: W) -> io::Result<()> {
    for s in skipped {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}
