//! Two-stage document ranking: BM25 candidate retrieval followed by a
//! cross-encoder re-ranker with sliding-window plus global attention.

pub mod cli;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod error;
pub mod model;
pub mod numeric;
pub mod retrieval;
pub mod rng;
pub mod synthetic;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
