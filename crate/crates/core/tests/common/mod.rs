//! Synthetic corpora shared by the integration tests.

#![allow(dead_code)]

use std::collections::HashSet;

use clonerec::corpus::{
    CloneMethodRecord, CloneReference, FunctionalityId, RecordId, SearchCorpus,
};
use clonerec::tokenizer::{Token, TokenSequence, END_OF_CLONE, START_OF_CLONE};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

pub fn record(id: RecordId, functionality: FunctionalityId, body: &[String]) -> CloneMethodRecord {
    let mut texts = vec![START_OF_CLONE.to_string()];
    texts.extend(body.iter().cloned());
    texts.push(END_OF_CLONE.to_string());
    CloneMethodRecord::new(
        CloneReference {
            record_id: id,
            functionality_id: functionality,
            file_path: format!("f{functionality}/m{id}.java"),
            start_line: 1,
            end_line: 1,
        },
        TokenSequence::from_texts(texts),
    )
}

/// `functionalities` groups of `per_group` distinct methods. Each group
/// draws its bodies from a private token pool plus a few shared tokens, so
/// methods of one functionality resemble each other.
pub fn grouped_corpus<R: Rng>(
    rng: &mut R,
    functionalities: u32,
    per_group: usize,
    body_len: std::ops::RangeInclusive<usize>,
) -> SearchCorpus {
    let shared: Vec<String> = ["(", ")", "{", "}", ";", "=", "int", "return", "<num_val>"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut next_id: RecordId = 1;
    for f in 0..functionalities {
        let pool: Vec<String> = (0..10).map(|i| format!("f{f}_t{i}")).collect();
        let mut made = 0;
        while made < per_group {
            let len = rng.random_range(body_len.clone());
            let body: Vec<String> = (0..len)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        shared.choose(rng).unwrap().clone()
                    } else {
                        pool.choose(rng).unwrap().clone()
                    }
                })
                .collect();
            if seen.insert(body.clone()) {
                records.push(record(next_id, f, &body));
                next_id += 1;
                made += 1;
            }
        }
    }
    SearchCorpus::from_records(records).unwrap()
}

/// Concatenation of `count` corpus methods picked at random.
pub fn sample_stream<R: Rng>(rng: &mut R, corpus: &SearchCorpus, count: usize) -> Vec<Token> {
    let mut picks: Vec<&CloneMethodRecord> = corpus.records().iter().collect();
    picks.shuffle(rng);
    picks
        .into_iter()
        .take(count)
        .flat_map(|r| r.tokens.iter().cloned())
        .collect()
}

/// Training sequences in record order.
pub fn sequences(corpus: &SearchCorpus) -> Vec<Vec<&str>> {
    corpus.records().iter().map(|r| r.tokens.texts()).collect()
}
