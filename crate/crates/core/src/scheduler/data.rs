use std::path::Path;

use anyhow::{bail, Context, Result};

use crate::corpus::{
    build_vocab, read_documents, read_entities, tag_entities, write_documents, Document, EntityDictionary, RawDocument,
    Source, Vocab,
};
use crate::synth::SynthCorpus;

/// File names inside a prepared data directory.
pub const VOCAB_FILE: &str = "vocab.txt";
pub const ENTITIES_FILE: &str = "entities.jsonl";
pub const A_DOCS: &str = "a.docs.jsonl";
pub const B_DOCS: &str = "b.docs.jsonl";
pub const EVALSET_FILE: &str = "evalset.jsonl";

/// Tokenized, entity-tagged A and B corpora under one shared vocabulary.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub dict: EntityDictionary,
    pub a: Vec<Document>,
    pub b: Vec<Document>,
}

fn tokenize_side(raw: &[RawDocument], default: Source, vocab: &Vocab) -> Vec<Document> {
    raw.iter().map(|r| Document::new(r.id, r.source.unwrap_or(default), &r.text, vocab)).collect()
}

impl Dataset {
    /// Builds the vocabulary over both corpora, tokenizes, and tags entities
    /// when a dictionary file is given.
    pub fn build(a: &[RawDocument], b: &[RawDocument], vocab_size: usize) -> Result<Self> {
        let texts = a.iter().chain(b).map(|d| d.text.as_str());
        let vocab = build_vocab(texts, vocab_size)?;
        let a = tokenize_side(a, Source::A, &vocab);
        let b = tokenize_side(b, Source::B, &vocab);
        let mut ids = std::collections::HashSet::new();
        for d in a.iter().chain(&b) {
            if !ids.insert(d.doc_id) {
                bail!("document id {} appears in both corpora", d.doc_id);
            }
        }
        Ok(Dataset { vocab, dict: EntityDictionary::new(), a, b })
    }

    /// Replaces the dictionary and re-tags every document.
    pub fn tag(&mut self, dict: EntityDictionary) -> Result<()> {
        let v = self.vocab.len();
        for side in [&mut self.a, &mut self.b] {
            let docs = std::mem::take(side);
            *side = docs.into_iter().map(|d| tag_entities(d, &dict, v)).collect::<Result<_, _>>()?;
        }
        self.dict = dict;
        Ok(())
    }

    /// Tokenized and tagged dataset for an in-memory synthetic corpus.
    pub fn from_synth(s: &SynthCorpus, vocab_size: usize) -> Result<Self> {
        let mut ds = Dataset::build(&s.a, &s.b, vocab_size)?;
        let mut dict = EntityDictionary::new();
        for e in &s.entities {
            let ty = crate::corpus::EntityType::parse(e.entity_type).context("synthetic entity type")?;
            dict.insert(e.entity_id, &e.surface, ty, &ds.vocab)?;
        }
        ds.tag(dict)?;
        Ok(ds)
    }

    /// Writes vocab and tokenized corpora into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        write_documents(&dir.join(A_DOCS), &self.a)?;
        write_documents(&dir.join(B_DOCS), &self.b)?;
        Ok(())
    }

    /// Loads a directory written by [`Dataset::save`]; the dictionary is read
    /// from `entities.jsonl` when present and documents keep their stored spans.
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocab::load(&dir.join(VOCAB_FILE)).with_context(|| format!("loading vocab from {}", dir.display()))?;
        let a = read_tagged(&dir.join(A_DOCS))?;
        let b = read_tagged(&dir.join(B_DOCS))?;
        let ent = dir.join(ENTITIES_FILE);
        let dict = if ent.exists() { read_entities(&ent, &vocab)? } else { EntityDictionary::new() };
        Ok(Dataset { vocab, dict, a, b })
    }

    /// Reads raw JSONL corpora (`id`, `text`, optional `source`).
    pub fn from_raw_files(a: &Path, b: &Path, vocab_size: usize) -> Result<Self> {
        let ra = read_documents(a).with_context(|| format!("reading {}", a.display()))?;
        let rb = read_documents(b).with_context(|| format!("reading {}", b.display()))?;
        Dataset::build(&ra, &rb, vocab_size)
    }
}

fn read_tagged(path: &Path) -> Result<Vec<Document>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn synth_roundtrip_through_disk() {
        let s = generate(&SynthConfig { n_a_docs: 40, n_b_docs: 60, n_a_entities: 4, n_b_entities: 4, ..SynthConfig::default() })
            .unwrap();
        let ds = Dataset::from_synth(&s, 2048).unwrap();
        assert_eq!(ds.a.iter().filter(|d| d.has_entity()).count(), 32);
        assert!(ds.a.iter().all(|d| d.tokens.iter().all(|&t| t != Vocab::UNK)));
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        s.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.a, ds.a);
        assert_eq!(back.b, ds.b);
        assert_eq!(back.dict.len(), 8);
    }
}
