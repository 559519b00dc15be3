//! Selective memory-augmented document translation.
//!
//! The crate is organised bottom-up:
//!
//! * [`corpus`]: parallel document ingestion, subword vocabulary, truncation.
//! * [`retrieval`]: BM25 translation-memory index and top-1 retrieval.
//! * [`layout`]: the concatenated `[X;Z]` encoder stream and every attention mask family.
//! * [`numerics`]: dense f64 tensors with a reverse-mode tape and a finite-difference checker.
//! * [`model`]: two-stream encoder/decoder with gate-sum fusion and the TM selection layer.
//! * [`training`]: multi-task instance stream, label-smoothed loss, Adam, early stopping.
//! * [`inference`]: beam-search document translation and corpus BLEU.
//! * [`cli`]: run configuration, artifact persistence and the `smdt` command dispatcher.
//!
//! Data-parallel loops (batch gradients, retrieval sweeps, validation, document
//! translation) go through [`parallel::Execution`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod inference;
pub mod layout;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod retrieval;
pub mod synthetic;
pub mod training;

pub use error::{Result, SmdtError};
