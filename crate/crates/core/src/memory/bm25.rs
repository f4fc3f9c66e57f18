use std::collections::{BTreeMap, HashMap};

use super::MemoryError;
use crate::corpus::TokenId;

pub const K1: f64 = 1.2;
pub const B: f64 = 0.75;

/// Okapi BM25 over token ids with the +1-smoothed IDF.
#[derive(Debug, Clone)]
pub struct InvertedIndex {
    postings: HashMap<TokenId, BTreeMap<u64, u32>>,
    doc_len: BTreeMap<u64, usize>,
    total_len: usize,
    pub k1: f64,
    pub b: f64,
}

impl Default for InvertedIndex {
    fn default() -> Self {
        InvertedIndex { postings: HashMap::new(), doc_len: BTreeMap::new(), total_len: 0, k1: K1, b: B }
    }
}

fn term_counts(tokens: &[TokenId]) -> BTreeMap<TokenId, u32> {
    let mut tf = BTreeMap::new();
    for &t in tokens {
        *tf.entry(t).or_insert(0) += 1;
    }
    tf
}

impl InvertedIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_docs(&self) -> usize {
        self.doc_len.len()
    }

    pub fn avgdl(&self) -> f64 {
        if self.doc_len.is_empty() {
            0.0
        } else {
            self.total_len as f64 / self.doc_len.len() as f64
        }
    }

    pub fn contains(&self, id: u64) -> bool {
        self.doc_len.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.doc_len.keys().copied()
    }

    /// Indexes `tokens` under `id`, replacing any previous document.
    pub fn insert(&mut self, id: u64, tokens: &[TokenId]) {
        if self.contains(id) {
            self.remove(id);
        }
        for (t, n) in term_counts(tokens) {
            self.postings.entry(t).or_default().insert(id, n);
        }
        self.doc_len.insert(id, tokens.len());
        self.total_len += tokens.len();
    }

    pub fn remove(&mut self, id: u64) {
        let Some(len) = self.doc_len.remove(&id) else { return };
        self.total_len -= len;
        self.postings.retain(|_, p| {
            p.remove(&id);
            !p.is_empty()
        });
    }

    /// Number of live documents containing `t`.
    pub fn doc_freq(&self, t: TokenId) -> usize {
        self.postings.get(&t).map_or(0, BTreeMap::len)
    }

    pub fn idf(&self, t: TokenId) -> f64 {
        let n = self.n_docs() as f64;
        let nt = self.doc_freq(t) as f64;
        ((n - nt + 0.5) / (nt + 0.5) + 1.0).ln()
    }

    fn term_score(&self, idf: f64, tf: u32, len: usize) -> f64 {
        let tf = f64::from(tf);
        let norm = self.k1 * (1.0 - self.b + self.b * len as f64 / self.avgdl());
        idf * tf * (self.k1 + 1.0) / (tf + norm)
    }

    /// BM25 score of document `id` for `query`; distinct query terms count once.
    pub fn score(&self, query: &[TokenId], id: u64) -> Result<f64, MemoryError> {
        let len = *self.doc_len.get(&id).ok_or(MemoryError::NotLive(id))?;
        let mut s = 0.0;
        for t in term_counts(query).into_keys() {
            if let Some(&tf) = self.postings.get(&t).and_then(|p| p.get(&id)) {
                s += self.term_score(self.idf(t), tf, len);
            }
        }
        Ok(s)
    }

    /// Scores of every document sharing a term with `query`. Each document's
    /// sum runs over terms in ascending id order.
    pub fn score_all(&self, query: &[TokenId]) -> BTreeMap<u64, f64> {
        let mut out = BTreeMap::new();
        for t in term_counts(query).into_keys() {
            let Some(p) = self.postings.get(&t) else { continue };
            let idf = self.idf(t);
            for (&id, &tf) in p {
                *out.entry(id).or_insert(0.0) += self.term_score(idf, tf, self.doc_len[&id]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn fixture() -> InvertedIndex {
        let mut ix = InvertedIndex::new();
        ix.insert(1, &[10, 11, 12]);
        ix.insert(2, &[10, 10, 13, 14]);
        ix.insert(3, &[15, 16]);
        ix
    }

    #[test]
    fn three_doc_fixture_by_hand() {
        let ix = fixture();
        // N = 3, avgdl = 9/3 = 3
        assert_eq!(ix.avgdl(), 3.0);
        // query [10, 12] against doc 1 (len 3 = avgdl, so norm = k1 = 1.2):
        //   idf(10) = ln((3-2+0.5)/(2+0.5) + 1) = ln(1.6)
        //   idf(12) = ln((3-1+0.5)/(1+0.5) + 1) = ln(8/3)
        //   each tf=1 term: idf * 1 * 2.2 / (1 + 1.2) = idf
        let expect1 = 1.6f64.ln() + (8.0f64 / 3.0).ln();
        assert!((ix.score(&[10, 12], 1).unwrap() - expect1).abs() < 1e-9);
        // doc 2 (len 4): norm = 1.2 * (0.25 + 0.75 * 4/3) = 1.5; tf(10)=2
        //   ln(1.6) * 2 * 2.2 / 3.5
        let expect2 = 1.6f64.ln() * 4.4 / 3.5;
        assert!((ix.score(&[10, 12], 2).unwrap() - expect2).abs() < 1e-9);
        assert_eq!(ix.score(&[10, 12], 3).unwrap(), 0.0);
        // repeated query terms count once
        assert_eq!(ix.score(&[12, 10, 10], 1).unwrap(), ix.score(&[10, 12], 1).unwrap());
        assert!(matches!(ix.score(&[10], 9), Err(MemoryError::NotLive(9))));
    }

    #[test]
    fn single_doc_index() {
        let mut ix = InvertedIndex::new();
        ix.insert(7, &[4, 5, 6]);
        // N = 1, every term has n_t = 1: idf = ln(0.5/1.5 + 1) = ln(4/3); len = avgdl
        let expect = 3.0 * (4.0f64 / 3.0).ln();
        assert!((ix.score(&[4, 5, 6], 7).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ubiquitous_term_has_positive_floor_idf() {
        let mut ix = InvertedIndex::new();
        for id in 0..5 {
            ix.insert(id, &[1, 2 + id as u32]);
        }
        let n: f64 = 5.0;
        assert!((ix.idf(1) - (1.0 + 0.5 / (n + 0.5)).ln()).abs() < 1e-15);
        assert!(ix.idf(1) > 0.0);
    }

    #[test]
    fn remove_restores_statistics() {
        let mut ix = fixture();
        ix.remove(3);
        assert_eq!(ix.n_docs(), 2);
        assert_eq!(ix.avgdl(), 3.5);
        assert_eq!(ix.doc_freq(15), 0);
        let scores = ix.score_all(&[10, 12]);
        assert_eq!(scores.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
        assert!((scores[&1] - ix.score(&[10, 12], 1).unwrap()).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn extra_occurrence_never_lowers_score(
            docs in proptest::collection::vec(proptest::collection::vec(0u32..12, 2..10), 1..6),
            query in proptest::collection::vec(0u32..12, 1..5),
            pick in any::<prop::sample::Index>(),
            slot in any::<prop::sample::Index>(),
        ) {
            // replace one non-query token of a doc by a query term: equal length, one more occurrence
            let which = pick.index(docs.len());
            let doc = &docs[which];
            let free: Vec<usize> = (0..doc.len()).filter(|&i| !query.contains(&doc[i])).collect();
            prop_assume!(!free.is_empty());
            let mut ix = InvertedIndex::new();
            for (i, d) in docs.iter().enumerate() {
                ix.insert(i as u64, d);
            }
            let before = ix.score(&query, which as u64).unwrap();
            let mut bumped = doc.clone();
            bumped[free[slot.index(free.len())]] = query[0];
            let mut ix2 = InvertedIndex::new();
            for (i, d) in docs.iter().enumerate() {
                ix2.insert(i as u64, if i == which { &bumped } else { d });
            }
            // other query terms keep their n_t and the length is unchanged, so only
            // query[0]'s contribution moves: from tf to tf + 1, or from 0 to positive
            let after = ix2.score(&query, which as u64).unwrap();
            prop_assert!(after >= before - 1e-12, "{} < {}", after, before);
        }
    }
}
