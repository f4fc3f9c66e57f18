//! A desk-scale laboratory for forgetting during language-model pre-training.
//!
//! The crate trains a tiny decoder-only transformer from scratch, measures
//! entity-centric memorization metrics on it, and runs memory-replay and
//! forgetting-curve experiments that emit deterministic CSV series.
//!
//! Module map:
//! - [`corpus`]: vocabulary, tokenization, dictionary entity tagging, corpus streams.
//! - [`model`]: the transformer, its optimizer and schedule, checkpoints, gradient checks.
//! - [`metrics`]: PPL, M(f), inclusive/exclusive entity metrics, eval-set construction.
//! - [`memory`]: the replay memory with BM25 and random retrieval plus the exit rule.
//! - [`scheduler`]: experiment orchestration, ledgers, run outputs.
//! - [`synth`]: generator for the synthetic A/B desk corpora.

pub mod cli;
pub mod corpus;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scheduler;
pub mod synth;
