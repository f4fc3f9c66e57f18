use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{CorpusError, TokenId};

pub const UNK_SURFACE: &str = "<unk>";
pub const BOS_SURFACE: &str = "<bos>";
pub const PAD_SURFACE: &str = "<pad>";

/// Word-level vocabulary. Ids are dense; the three specials occupy 0..3.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub const UNK: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const PAD: TokenId = 2;

    /// Builds a vocab from regular words; the specials are prepended.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Result<Self, CorpusError> {
        let mut tokens = vec![UNK_SURFACE.to_string(), BOS_SURFACE.to_string(), PAD_SURFACE.to_string()];
        tokens.extend(words);
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.len() < 3
            || tokens[0] != UNK_SURFACE
            || tokens[1] != BOS_SURFACE
            || tokens[2] != PAD_SURFACE
        {
            return Err(CorpusError::Config("vocab must start with <unk>, <bos>, <pad>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(CorpusError::Config(format!("invalid vocab entry {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(CorpusError::Config(format!("duplicate vocab entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

fn is_special(word: &str) -> bool {
    matches!(word, UNK_SURFACE | BOS_SURFACE | PAD_SURFACE)
}

/// Keeps the `max_size - 3` most frequent lowercase words; ties go to the
/// lexicographically smaller word.
pub fn build_vocab<'a, I>(texts: I, max_size: usize) -> Result<Vocab, CorpusError>
where
    I: IntoIterator<Item = &'a str>,
{
    if max_size < 4 {
        return Err(CorpusError::Config(format!("max_size must be >= 4, got {max_size}")));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for text in texts {
        for w in text.split_whitespace() {
            let w = w.to_lowercase();
            if !is_special(&w) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - 3);
    Vocab::from_words(ranked.into_iter().map(|(w, _)| w))
}

/// Lowercase whitespace split; out-of-vocabulary words map to UNK.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<TokenId> {
    text.split_whitespace()
        .map(|w| {
            let w = w.to_lowercase();
            if is_special(&w) {
                Vocab::UNK
            } else {
                vocab.id(&w).unwrap_or(Vocab::UNK)
            }
        })
        .collect()
}

pub fn detokenize(ids: &[TokenId], vocab: &Vocab) -> String {
    ids.iter()
        .map(|&id| vocab.surface(id).unwrap_or(UNK_SURFACE))
        .collect::<Vec<_>>()
        .join(" ")
}
