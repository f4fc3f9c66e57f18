//! Synthetic A/B corpora for desk-scale runs.
//!
//! Filler text comes from a sparse word-level Markov chain. An entity document
//! plants one entity mention preceded by a title word and followed by a
//! short fact phrase specific to that entity. A entities are two words long,
//! B entities one. Corpus B can reuse
//! A's title words for its own entities, which puts B in direct conflict with
//! what A taught and makes forgetting observable within a few thousand steps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{ensure, Context, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{EntityType, RawDocument, Source};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_a_docs: usize,
    pub n_b_docs: usize,
    pub n_a_entities: usize,
    pub n_b_entities: usize,
    /// Share of A documents that mention an entity.
    pub a_entity_fraction: f64,
    pub b_entity_fraction: f64,
    /// B entities take over the title words of A entities.
    pub b_reuses_titles: bool,
    /// Distinct B title words when they are not reused from A.
    pub b_title_pool: usize,
    pub filler_words: usize,
    /// Filler tokens before the title word, inclusive range.
    pub lead: (usize, usize),
    /// Filler tokens after the fact phrase, inclusive range.
    pub tail: (usize, usize),
    pub fact_len: usize,
    /// Length of entity-free documents, inclusive range.
    pub plain_len: (usize, usize),
}

impl Default for SynthConfig {
    /// The A→B transition corpus: 2k A documents over 50 entities, 10k B documents.
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_a_docs: 2000,
            n_b_docs: 10000,
            n_a_entities: 50,
            n_b_entities: 50,
            a_entity_fraction: 0.8,
            b_entity_fraction: 0.3,
            b_reuses_titles: true,
            b_title_pool: 50,
            filler_words: 1500,
            lead: (34, 44),
            tail: (34, 42),
            fact_len: 3,
            plain_len: (70, 95),
        }
    }
}

impl SynthConfig {
    pub const PRESETS: [&'static str; 3] = ["transition", "mixed", "curve"];

    /// Named corpora tuned for the desk experiments.
    ///
    /// - `transition`: the default, for A→B forgetting.
    /// - `mixed`: few A entities and many one-token B entities with their own
    ///   titles, for comparing replay strategies on the mixed stream.
    /// - `curve`: the conflict corpus with sparser A mentions and a shorter B,
    ///   for forgetting curves.
    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        let base = SynthConfig { seed, ..SynthConfig::default() };
        match name {
            "transition" => Some(base),
            "mixed" => Some(SynthConfig {
                n_b_docs: 4000,
                n_b_entities: 350,
                a_entity_fraction: 0.3,
                b_entity_fraction: 0.09,
                b_reuses_titles: false,
                filler_words: 700,
                fact_len: 6,
                ..base
            }),
            "curve" => Some(SynthConfig { n_b_docs: 3000, a_entity_fraction: 0.3, ..base }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthEntity {
    pub entity_id: u64,
    pub surface: String,
    #[serde(rename = "type")]
    pub entity_type: &'static str,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub a: Vec<RawDocument>,
    pub b: Vec<RawDocument>,
    pub entities: Vec<SynthEntity>,
}

struct Planted {
    surface: String,
    title: String,
    fact: Vec<usize>,
}

struct Chain {
    succ: Vec<[usize; 3]>,
}

impl Chain {
    const WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];

    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let succ = (0..n).map(|_| [rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..n)]).collect();
        Chain { succ }
    }

    fn next(&self, w: usize, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let s = &self.succ[w];
        if u < Self::WEIGHTS[0] {
            s[0]
        } else if u < Self::WEIGHTS[0] + Self::WEIGHTS[1] {
            s[1]
        } else {
            s[2]
        }
    }

    fn walk(&self, from: usize, n: usize, out: &mut Vec<String>, rng: &mut ChaCha8Rng) -> usize {
        let mut w = from;
        for _ in 0..n {
            w = self.next(w, rng);
            out.push(filler(w));
        }
        w
    }
}

fn filler(w: usize) -> String {
    format!("w{w}")
}

fn entity_type(i: usize) -> EntityType {
    EntityType::ALL[i % 4]
}

fn plant(surface: String, title: usize, filler_words: usize, fact_len: usize, rng: &mut ChaCha8Rng) -> Planted {
    Planted {
        surface,
        title: format!("ti{title}"),
        fact: (0..fact_len).map(|_| rng.random_range(0..filler_words)).collect(),
    }
}

fn entity_doc(e: &Planted, cfg: &SynthConfig, chain: &Chain, rng: &mut ChaCha8Rng) -> String {
    let mut words = Vec::new();
    let start = rng.random_range(0..cfg.filler_words);
    chain.walk(start, rng.random_range(cfg.lead.0..=cfg.lead.1), &mut words, rng);
    words.push(e.title.clone());
    words.push(e.surface.clone());
    let mut last = start;
    for &f in &e.fact {
        words.push(filler(f));
        last = f;
    }
    chain.walk(last, rng.random_range(cfg.tail.0..=cfg.tail.1), &mut words, rng);
    words.join(" ")
}

fn plain_doc(cfg: &SynthConfig, chain: &Chain, rng: &mut ChaCha8Rng) -> String {
    let mut words = Vec::new();
    let start = rng.random_range(0..cfg.filler_words);
    chain.walk(start, rng.random_range(cfg.plain_len.0..=cfg.plain_len.1), &mut words, rng);
    words.join(" ")
}

#[allow(clippy::too_many_arguments)]
fn side(
    n_docs: usize,
    fraction: f64,
    planted: &[Planted],
    first_id: u64,
    source: Source,
    cfg: &SynthConfig,
    chain: &Chain,
    rng: &mut ChaCha8Rng,
) -> Vec<RawDocument> {
    let with_entity = (fraction * n_docs as f64).round() as usize;
    let mut flags: Vec<bool> = (0..n_docs).map(|i| i < with_entity).collect();
    rand::seq::SliceRandom::shuffle(flags.as_mut_slice(), rng);
    let mut k = 0;
    flags
        .into_iter()
        .enumerate()
        .map(|(i, ent)| {
            let text = if ent && !planted.is_empty() {
                // round-robin keeps entity frequencies balanced
                let e = &planted[k % planted.len()];
                k += 1;
                entity_doc(e, cfg, chain, rng)
            } else {
                plain_doc(cfg, chain, rng)
            };
            RawDocument { id: first_id + i as u64, text, source: Some(source) }
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    ensure!(cfg.filler_words >= 2, "filler_words must be at least 2");
    ensure!(cfg.lead.0 <= cfg.lead.1 && cfg.tail.0 <= cfg.tail.1 && cfg.plain_len.0 <= cfg.plain_len.1, "empty length range");
    ensure!(
        (0.0..=1.0).contains(&cfg.a_entity_fraction) && (0.0..=1.0).contains(&cfg.b_entity_fraction),
        "entity fractions must lie in [0, 1]"
    );
    ensure!(
        !cfg.b_reuses_titles || cfg.n_a_entities > 0 || cfg.n_b_entities == 0,
        "b_reuses_titles needs A entities"
    );
    ensure!(cfg.b_reuses_titles || cfg.b_title_pool > 0 || cfg.n_b_entities == 0, "b_title_pool must be positive");
    let mut rng = rng::substream(cfg.seed, "synth");
    let chain = Chain::new(cfg.filler_words, &mut rng);
    let a_planted: Vec<Planted> =
        (0..cfg.n_a_entities).map(|i| plant(format!("ka{i}n ka{i}s"), i, cfg.filler_words, cfg.fact_len, &mut rng)).collect();
    let b_planted: Vec<Planted> = (0..cfg.n_b_entities)
        .map(|i| {
            let title =
                if cfg.b_reuses_titles { i % cfg.n_a_entities } else { cfg.n_a_entities + i % cfg.b_title_pool };
            plant(format!("mi{i}"), title, cfg.filler_words, cfg.fact_len, &mut rng)
        })
        .collect();
    let a = side(cfg.n_a_docs, cfg.a_entity_fraction, &a_planted, 0, Source::A, cfg, &chain, &mut rng);
    let b = side(cfg.n_b_docs, cfg.b_entity_fraction, &b_planted, cfg.n_a_docs as u64, Source::B, cfg, &chain, &mut rng);
    let entities = a_planted
        .iter()
        .chain(&b_planted)
        .enumerate()
        .map(|(i, p)| SynthEntity {
            entity_id: i as u64,
            surface: p.surface.clone(),
            entity_type: entity_type(i).as_str(),
        })
        .collect();
    Ok(SynthCorpus { a, b, entities })
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

impl SynthCorpus {
    /// Writes `a.jsonl`, `b.jsonl` and `entities.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("a.jsonl"), &self.a)?;
        write_jsonl(&dir.join("b.jsonl"), &self.b)?;
        write_jsonl(&dir.join("entities.jsonl"), &self.entities)?;
        Ok(())
    }

    /// Number of distinct word types across both corpora.
    pub fn word_types(&self) -> usize {
        let mut set = std::collections::HashSet::new();
        for d in self.a.iter().chain(&self.b) {
            set.extend(d.text.split_whitespace());
        }
        set.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { n_a_docs: 100, n_b_docs: 200, n_a_entities: 5, n_b_entities: 5, ..SynthConfig::default() }
    }

    #[test]
    fn deterministic_and_sized() {
        let c = small();
        let x = generate(&c).unwrap();
        let y = generate(&c).unwrap();
        assert_eq!(x.a, y.a);
        assert_eq!(x.b, y.b);
        assert_eq!(x.a.len(), 100);
        assert_eq!(x.b.len(), 200);
        assert_eq!(x.entities.len(), 10);
        let other = generate(&SynthConfig { seed: 1, ..c }).unwrap();
        assert_ne!(x.a, other.a);
    }

    #[test]
    fn a_entities_never_appear_in_b() {
        let x = generate(&small()).unwrap();
        for e in &x.entities[..5] {
            assert!(x.b.iter().all(|d| !d.text.contains(&e.surface)));
            assert!(x.a.iter().any(|d| d.text.contains(&e.surface)));
        }
        let with = x.a.iter().filter(|d| d.text.contains(" ka")).count();
        assert_eq!(with, 80);
    }

    #[test]
    fn default_fits_the_desk_vocab() {
        let x = generate(&SynthConfig::default()).unwrap();
        // room for the three specials in V = 2048
        assert!(x.word_types() <= 2045, "{}", x.word_types());
    }

    #[test]
    fn entity_has_context_on_both_sides() {
        let x = generate(&small()).unwrap();
        for d in x.a.iter().filter(|d| d.text.contains(" ka")) {
            let w: Vec<&str> = d.text.split_whitespace().collect();
            let p = w.iter().position(|t| t.starts_with("ka")).unwrap();
            assert!(p >= 35 && w.len() - (p + 2) >= 34);
        }
    }
}
