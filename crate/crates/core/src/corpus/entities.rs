use std::collections::{BTreeMap, HashMap};

use super::{tokenize, CorpusError, Document, EntitySpan, EntityType, TokenId, Vocab};

#[derive(Debug, Clone, PartialEq)]
pub struct EntityEntry {
    pub surface: String,
    pub tokens: Vec<TokenId>,
    pub entity_type: EntityType,
}

/// Entities keyed by id, each carrying its tokenization under the active vocab.
#[derive(Debug, Clone, Default)]
pub struct EntityDictionary {
    entries: BTreeMap<u64, EntityEntry>,
}

impl EntityDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entity_id: u64, surface: &str, entity_type: EntityType, vocab: &Vocab) -> Result<(), CorpusError> {
        if surface.trim().is_empty() {
            return Err(CorpusError::Config(format!("entity {entity_id} has an empty surface form")));
        }
        let tokens = tokenize(surface, vocab);
        self.insert_tokens(entity_id, surface, tokens, entity_type);
        Ok(())
    }

    /// Inserts pre-tokenized entries; `tag_entities` validates ids against V.
    pub fn insert_tokens(&mut self, entity_id: u64, surface: &str, tokens: Vec<TokenId>, entity_type: EntityType) {
        self.entries.insert(
            entity_id,
            EntityEntry { surface: surface.to_string(), tokens, entity_type },
        );
    }

    pub fn get(&self, entity_id: u64) -> Option<&EntityEntry> {
        self.entries.get(&entity_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &EntityEntry)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check_vocab(&self, vocab_size: usize) -> Result<(), CorpusError> {
        for (&entity_id, e) in &self.entries {
            if let Some(&token) = e.tokens.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(CorpusError::VocabMismatch { entity_id, token, vocab_size });
            }
        }
        Ok(())
    }

    /// Candidates grouped by first token, longest first, then lowest id.
    /// Entries containing UNK are not matchable.
    fn by_first_token(&self) -> HashMap<TokenId, Vec<(u64, &EntityEntry)>> {
        let mut map: HashMap<TokenId, Vec<(u64, &EntityEntry)>> = HashMap::new();
        for (&id, e) in &self.entries {
            if e.tokens.is_empty() || e.tokens.contains(&Vocab::UNK) {
                continue;
            }
            map.entry(e.tokens[0]).or_default().push((id, e));
        }
        for v in map.values_mut() {
            v.sort_by(|a, b| b.1.tokens.len().cmp(&a.1.tokens.len()).then(a.0.cmp(&b.0)));
        }
        map
    }
}

/// Left-to-right longest-match tagging over token ids. Replaces any existing spans.
pub fn tag_entities(mut doc: Document, dict: &EntityDictionary, vocab_size: usize) -> Result<Document, CorpusError> {
    dict.check_vocab(vocab_size)?;
    let index = dict.by_first_token();
    let toks = &doc.tokens;
    let mut spans = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        let hit = index.get(&toks[i]).and_then(|cands| {
            cands
                .iter()
                .find(|(_, e)| toks.len() - i >= e.tokens.len() && toks[i..i + e.tokens.len()] == e.tokens[..])
        });
        match hit {
            Some(&(id, e)) => {
                let end = i + e.tokens.len();
                spans.push(EntitySpan { entity_id: id, token_start: i, token_end: end, entity_type: e.entity_type });
                i = end;
            }
            None => i += 1,
        }
    }
    doc.entities = spans;
    Ok(doc)
}
