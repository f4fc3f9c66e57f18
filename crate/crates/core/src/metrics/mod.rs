//! Perplexity, M(f), the inclusive/exclusive entity metrics, eval-set
//! construction and per-type reporting.

mod evalset;
mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EntityType, TokenId};
use crate::model::{argmax, log_softmax_at, LanguageModel, Logits, ModelError};

pub use evalset::{
    bucket_by_difficulty, build_entity_evalset, filter_memorized, per_entity_accuracy, read_items, write_items,
    DifficultyBucket,
};
pub use report::{evaluate, read_metrics_csv, MetricReport, MetricsCsv, TypeMetrics};

/// Prefix and target length of an eval item.
pub const WINDOW: usize = 32;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("mode mismatch: expected {expected:?} items")]
    ModeMismatch { expected: Mode },
    #[error("empty intersection: no entity is frequent in A and rare in B")]
    EmptyIntersection,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// A next-token context `(s, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfContext {
    pub s: Vec<TokenId>,
    pub y: TokenId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Inclusive,
    Exclusive,
}

/// One prefix/continuation probe around an entity occurrence. Inclusive and
/// exclusive twins of the same occurrence share `pair_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub item_id: u64,
    pub pair_id: u64,
    pub doc_id: u64,
    pub entity_id: u64,
    pub entity_type: EntityType,
    pub mode: Mode,
    pub prefix: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub entity_tokens: Vec<TokenId>,
}

impl EvalItem {
    /// Prefix followed by target.
    pub fn window(&self) -> Vec<TokenId> {
        let mut w = self.prefix.clone();
        w.extend_from_slice(&self.target);
        w
    }
}

/// Whether `needle` occurs contiguously in `hay`.
pub fn contains_subsequence(hay: &[TokenId], needle: &[TokenId]) -> bool {
    needle.is_empty() || hay.windows(needle.len()).any(|w| w == needle)
}

/// Fraction of positions where `decoded` matches `target`.
pub fn inclusive_score(decoded: &[TokenId], target: &[TokenId]) -> f64 {
    if target.is_empty() {
        return 0.0;
    }
    let hits = decoded.iter().zip(target).filter(|(a, b)| a == b).count();
    hits as f64 / target.len() as f64
}

/// 1 if the entity appears in the decoded continuation, else 0.
pub fn exclusive_score(decoded: &[TokenId], entity: &[TokenId]) -> f64 {
    if contains_subsequence(decoded, entity) {
        1.0
    } else {
        0.0
    }
}

/// Splits `seq` into windows of at most `ctx` tokens that overlap by one, so
/// each token after the first is predicted exactly once.
fn context_windows(seq: &[TokenId], ctx: usize) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < seq.len() {
        let end = (start + ctx).min(seq.len());
        out.push(seq[start..end].to_vec());
        start = end - 1;
    }
    out
}

/// Runs `forward_batch` over `seqs` in bounded chunks, handing each
/// sequence's logits to `f` in order.
pub(crate) fn for_each_logits<M, F>(model: &M, seqs: &[Vec<TokenId>], mut f: F) -> Result<()>
where
    M: LanguageModel + ?Sized,
    F: FnMut(usize, &Logits),
{
    const CHUNK: usize = 32;
    for (c, chunk) in seqs.chunks(CHUNK).enumerate() {
        for (j, l) in model.forward_batch(chunk)?.iter().enumerate() {
            f(c * CHUNK + j, l);
        }
    }
    Ok(())
}

/// Sum of next-token log-probabilities and the number of predictions.
pub fn logprob_sum<M: LanguageModel + ?Sized>(model: &M, seqs: &[Vec<TokenId>]) -> Result<(f64, usize)> {
    let mut windows = Vec::new();
    for s in seqs {
        if s.len() < 2 {
            return Err(ModelError::NothingToPredict.into());
        }
        windows.extend(context_windows(s, model.context_len()));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for_each_logits(model, &windows, |k, l| {
        let w = &windows[k];
        for i in 0..w.len() - 1 {
            sum += log_softmax_at(l.row(i), w[i + 1] as usize);
            n += 1;
        }
    })?;
    Ok((sum, n))
}

/// Token-weighted perplexity over all sequences.
pub fn ppl<M: LanguageModel + ?Sized>(model: &M, seqs: &[Vec<TokenId>]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(MetricsError::Empty("document set"));
    }
    let (sum, n) = logprob_sum(model, seqs)?;
    Ok((-sum / n as f64).exp())
}

/// Fraction of contexts whose final-row argmax equals `y`.
pub fn mf<M: LanguageModel + ?Sized>(model: &M, contexts: &[MfContext]) -> Result<f64> {
    if contexts.is_empty() {
        return Err(MetricsError::Empty("context set"));
    }
    let seqs: Vec<Vec<TokenId>> = contexts.iter().map(|c| c.s.clone()).collect();
    let mut hits = 0;
    for_each_logits(model, &seqs, |i, l| hits += usize::from(argmax(l.last()) == contexts[i].y))?;
    Ok(hits as f64 / contexts.len() as f64)
}

/// Teacher-forced accuracy on positions `from..` of each sequence, i.e. M(f)
/// over every context `(seq[..t], seq[t])` with `t >= from`, in one forward
/// per sequence. Returns (hits, contexts).
pub fn mf_counts<M: LanguageModel + ?Sized>(model: &M, seqs: &[Vec<TokenId>], from: usize) -> Result<(usize, usize)> {
    let mut hits = 0;
    let mut n = 0;
    for_each_logits(model, seqs, |i, l| {
        let s = &seqs[i];
        for (t, &tok) in s.iter().enumerate().skip(from.max(1)) {
            hits += usize::from(argmax(l.row(t - 1)) == tok);
            n += 1;
        }
    })?;
    Ok((hits, n))
}

fn check_mode(items: &[EvalItem], mode: Mode) -> Result<()> {
    if items.is_empty() {
        return Err(MetricsError::Empty("item set"));
    }
    if items.iter().any(|i| i.mode != mode) {
        return Err(MetricsError::ModeMismatch { expected: mode });
    }
    Ok(())
}

/// Greedy continuations of every item, as long as its target.
pub fn decode_items<M: LanguageModel + ?Sized>(model: &M, items: &[EvalItem]) -> Result<Vec<Vec<TokenId>>> {
    let mut out = vec![Vec::new(); items.len()];
    // group by target length so batched decoders see uniform requests
    let mut lens: Vec<usize> = items.iter().map(|i| i.target.len()).collect();
    lens.sort_unstable();
    lens.dedup();
    for n in lens {
        let idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].target.len() == n).collect();
        let prefixes: Vec<Vec<TokenId>> = idx.iter().map(|&i| items[i].prefix.clone()).collect();
        let decoded = model.greedy_decode_batch(&prefixes, n)?;
        for (i, d) in idx.into_iter().zip(decoded) {
            out[i] = d;
        }
    }
    Ok(out)
}

/// Mean positional accuracy of greedy continuations on inclusive items.
pub fn m_in<M: LanguageModel + ?Sized>(model: &M, items: &[EvalItem]) -> Result<f64> {
    check_mode(items, Mode::Inclusive)?;
    let decoded = decode_items(model, items)?;
    let hits: f64 = items.iter().zip(&decoded).map(|(i, d)| inclusive_score(d, &i.target) * i.target.len() as f64).sum();
    let total: usize = items.iter().map(|i| i.target.len()).sum();
    Ok(hits / total as f64)
}

/// Fraction of exclusive items whose continuation contains the entity.
pub fn m_ex<M: LanguageModel + ?Sized>(model: &M, items: &[EvalItem]) -> Result<f64> {
    check_mode(items, Mode::Exclusive)?;
    let decoded = decode_items(model, items)?;
    let hits: f64 = items.iter().zip(&decoded).map(|(i, d)| exclusive_score(d, &i.entity_tokens)).sum();
    Ok(hits / items.len() as f64)
}
