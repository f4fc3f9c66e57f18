//! Micro fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use forgetrace::scheduler::{Dataset, RunConfig, Strategy};
use forgetrace::synth::{generate, SynthConfig, SynthCorpus};

pub const MICRO_VOCAB: usize = 128;

/// About 60-token documents, just long enough for 32-token eval windows.
pub fn micro_synth() -> SynthConfig {
    SynthConfig {
        seed: 3,
        n_a_docs: 60,
        n_b_docs: 60,
        n_a_entities: 6,
        n_b_entities: 6,
        a_entity_fraction: 0.8,
        b_entity_fraction: 0.5,
        b_title_pool: 6,
        filler_words: 40,
        lead: (33, 36),
        tail: (33, 36),
        fact_len: 3,
        plain_len: (40, 60),
        ..SynthConfig::default()
    }
}

pub fn micro_corpus() -> SynthCorpus {
    generate(&micro_synth()).unwrap()
}

pub fn micro_dataset() -> Dataset {
    Dataset::from_synth(&micro_corpus(), MICRO_VOCAB).unwrap()
}

pub const MICRO_CONFIG: &str = "\
n_layers = 1
d_model = 8
n_heads = 2
d_ffn = 16
vocab_size = 128
context_len = 64
seq_len = 64
batch_size = 4
warmup_steps = 2
eval_every = 10
checkpoint_every = 0
eval_max_pairs = 6
";

/// The micro config with `extra` lines (`key = value`) laid over it.
pub fn micro_config(strategy: Strategy, extra: &str) -> RunConfig {
    let mut cfg = RunConfig::parse(&format!("{MICRO_CONFIG}strategy = {}\n", strategy.as_str())).unwrap();
    for line in extra.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').unwrap();
        cfg.set(k.trim(), v.trim()).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

/// Raw corpora plus dictionary in `dir`, as `build-corpus` expects them.
pub fn write_micro_raw(dir: &Path) {
    micro_corpus().write(dir).unwrap();
}
