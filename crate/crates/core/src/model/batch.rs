use crate::corpus::{TokenId, Vocab};

use super::ModelError;

/// A `rows × seq_len` token matrix with a loss mask. `mask[r][t]` marks
/// position `t` as supervised, predicting `tokens[r][t + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    seq_len: usize,
    tokens: Vec<TokenId>,
    mask: Vec<bool>,
}

impl Batch {
    /// Panics on ragged input; use [`Batch::try_new`] for untrusted data.
    pub fn new(rows: Vec<Vec<TokenId>>, mask: Vec<Vec<bool>>) -> Self {
        Self::try_new(rows, mask).expect("well-formed batch")
    }

    pub fn try_new(rows: Vec<Vec<TokenId>>, mask: Vec<Vec<bool>>) -> Result<Self, ModelError> {
        if rows.len() != mask.len() {
            return Err(ModelError::BatchShape("row count differs from mask".into()));
        }
        let seq_len = rows.first().map_or(0, Vec::len);
        for (r, m) in rows.iter().zip(&mask) {
            if r.len() != seq_len || m.len() != seq_len {
                return Err(ModelError::BatchShape("ragged rows".into()));
            }
            if m.last() == Some(&true) {
                return Err(ModelError::BatchShape("last position has no successor".into()));
            }
            for t in 0..seq_len.saturating_sub(1) {
                if m[t] && r[t + 1] == Vocab::PAD {
                    return Err(ModelError::BatchShape(format!("position {t} predicts PAD")));
                }
            }
        }
        Ok(Batch {
            seq_len,
            tokens: rows.into_iter().flatten().collect(),
            mask: mask.into_iter().flatten().collect(),
        })
    }

    /// Every position of every row supervised except the last.
    pub fn from_sequences(seqs: &[Vec<TokenId>]) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut rows = Vec::new();
        let mut mask = Vec::new();
        for s in seqs {
            let mut r = s.clone();
            let mut m = vec![true; s.len().saturating_sub(1)];
            r.resize(len, Vocab::PAD);
            m.resize(len, false);
            rows.push(r);
            mask.push(m);
        }
        Self::new(rows, mask)
    }

    pub fn rows(&self) -> usize {
        self.tokens.len().checked_div(self.seq_len).unwrap_or(0)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn row(&self, r: usize) -> &[TokenId] {
        &self.tokens[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn mask(&self, r: usize) -> &[bool] {
        &self.mask[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Number of leading positions of row `r` that influence the loss.
    pub(crate) fn effective_len(&self, r: usize) -> usize {
        self.mask(r).iter().rposition(|&m| m).map_or(0, |t| t + 2)
    }

    pub fn clear_mask(&mut self) {
        self.mask.iter_mut().for_each(|m| *m = false);
    }
}
