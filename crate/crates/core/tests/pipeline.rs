mod common;

use clonerec::eval::{build_queries, evaluate_pipeline, EvalConfig};
use clonerec::lm::NGramModel;
use clonerec::retrieval::TfIdfIndex;
use clonerec::tokenizer::{Token, TokenSequence};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup() -> (clonerec::corpus::SearchCorpus, NGramModel, TfIdfIndex) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let corpus = common::grouped_corpus(&mut rng, 4, 5, 5..=10);
    let model = NGramModel::train(&common::sequences(&corpus), 3).unwrap();
    let index = TfIdfIndex::fit(&corpus).unwrap();
    (corpus, model, index)
}

#[test]
fn no_windows_gives_an_empty_report() {
    let (corpus, model, index) = setup();
    let stream: Vec<Token> = TokenSequence::from_texts(["int", "x", ";"]).into_inner();
    let queries = build_queries(&stream, 2);
    assert!(queries.is_empty());
    let report = evaluate_pipeline(&model, &corpus, &index, &queries, &EvalConfig::default());
    assert!(report.results.is_empty() && report.failures.is_empty());
    assert_eq!(report.summary.num_queries, 0);
    assert!(report.summary.accuracy.is_empty());
}

#[test]
fn unknown_ground_truth_is_recorded_not_fatal() {
    let (corpus, model, index) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut stream = common::sample_stream(&mut rng, &corpus, 3);
    // a method that is not in the corpus
    stream.extend(TokenSequence::from_texts(["<soc>", "novel", "body", "<eoc>"]).into_inner());
    let queries = build_queries(&stream, 6);
    let report = evaluate_pipeline(&model, &corpus, &index, &queries, &EvalConfig::default());
    assert!(!report.failures.is_empty());
    assert!(report.failures.iter().all(|f| f.stage == "ground_truth"));
    assert_eq!(report.results.len() + report.failures.len(), queries.len());
    assert_eq!(report.summary.num_failures, report.failures.len());
    let ids: Vec<u64> = report.results.iter().map(|r| r.query_id).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn reports_are_reproducible() {
    let (corpus, model, index) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let stream = common::sample_stream(&mut rng, &corpus, 6);
    let queries = build_queries(&stream, 8);
    let a = evaluate_pipeline(&model, &corpus, &index, &queries, &EvalConfig::default());
    let b = evaluate_pipeline(&model, &corpus, &index, &queries, &EvalConfig::default());
    assert_eq!(a, b);
    for r in &a.results {
        assert!(r.recommendations.len() <= 10);
        assert!(r.recommendations.windows(2).all(|w| w[0].score > w[1].score
            || (w[0].score == w[1].score && w[0].record_id < w[1].record_id)));
        assert_eq!(r.ground_truth.first().map(String::as_str), Some("<soc>"));
    }
}
