//! Documents, vocabulary, dictionary entity tagging and corpus streams.

mod entities;
mod io;
mod stream;
mod vocab;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use entities::{tag_entities, EntityDictionary, EntityEntry};
pub use io::{read_documents, read_entities, write_documents, RawDocument};
pub use stream::{compose_corpus, pack_batch, segment_eval_set, CorpusMode, CorpusStream, SampledDoc};
pub use vocab::{build_vocab, detokenize, tokenize, Vocab};

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("dictionary/vocab mismatch: entity {entity_id} uses token id {token} but V = {vocab_size}")]
    VocabMismatch { entity_id: u64, token: TokenId, vocab_size: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which of the two corpora a document came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityType {
    #[serde(rename = "MISC")]
    Misc,
    #[serde(rename = "PER")]
    Per,
    #[serde(rename = "LOC")]
    Loc,
    #[serde(rename = "ORG")]
    Org,
}

impl EntityType {
    pub const ALL: [EntityType; 4] = [EntityType::Misc, EntityType::Per, EntityType::Loc, EntityType::Org];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Misc => "MISC",
            EntityType::Per => "PER",
            EntityType::Loc => "LOC",
            EntityType::Org => "ORG",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "MISC" => Some(EntityType::Misc),
            "PER" => Some(EntityType::Per),
            "LOC" => Some(EntityType::Loc),
            "ORG" => Some(EntityType::Org),
            _ => None,
        }
    }
}

/// A tagged entity occurrence; `token_end` is exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub entity_id: u64,
    pub token_start: usize,
    pub token_end: usize,
    pub entity_type: EntityType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: u64,
    pub source: Source,
    pub tokens: Vec<TokenId>,
    pub entities: Vec<EntitySpan>,
    pub char_text: String,
}

impl Document {
    /// Tokenizes `text` under `vocab`; entity spans start empty.
    pub fn new(doc_id: u64, source: Source, text: &str, vocab: &Vocab) -> Self {
        Document {
            doc_id,
            source,
            tokens: tokenize(text, vocab),
            entities: Vec::new(),
            char_text: text.to_string(),
        }
    }

    pub fn has_entity(&self) -> bool {
        !self.entities.is_empty()
    }
}
