//! Recommend real clone methods for a language-model predicted method body.
//!
//! The pipeline: [`tokenizer`] normalizes Java source, [`corpus`] builds the
//! deduplicated search corpus, [`lm`] generates a clone prediction from a
//! context window, [`retrieval`] ranks corpus methods against the prediction
//! by TF-IDF cosine similarity, and [`eval`] scores the whole thing.

pub mod cli;
pub mod corpus;
pub mod eval;
pub mod lm;
pub mod retrieval;
pub mod tokenizer;
