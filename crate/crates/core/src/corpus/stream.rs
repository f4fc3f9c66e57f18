use rand::seq::{index, SliceRandom};

use super::{CorpusError, Document, TokenId, Vocab};
use crate::model::Batch;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusMode {
    /// Every A batch, then every B batch.
    SequentialAB,
    /// One seeded permutation of A ∪ B.
    MixedShuffled,
}

impl CorpusMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sequential_ab" | "sequential_AB" => Some(CorpusMode::SequentialAB),
            "mixed_shuffled" => Some(CorpusMode::MixedShuffled),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CorpusMode::SequentialAB => "sequential_ab",
            CorpusMode::MixedShuffled => "mixed_shuffled",
        }
    }
}

/// Training order over a fixed document set. Batch order is a pure function
/// of the documents and `shuffle_seed`.
#[derive(Debug, Clone)]
pub struct CorpusStream {
    docs: Vec<Document>,
    batches: Vec<Vec<usize>>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub shuffle_seed: u64,
    boundary: Option<usize>,
}

impl CorpusStream {
    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn batch(&self, i: usize) -> Vec<&Document> {
        self.batches[i].iter().map(|&j| &self.docs[j]).collect()
    }

    pub fn batches(&self) -> impl Iterator<Item = Vec<&Document>> + '_ {
        (0..self.batches.len()).map(move |i| self.batch(i))
    }

    /// Number of leading batches drawn from A in sequential mode.
    pub fn boundary(&self) -> Option<usize> {
        self.boundary
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    /// Documents in training order.
    pub fn ordered_docs(&self) -> impl Iterator<Item = &Document> + '_ {
        self.batches.iter().flatten().map(move |&j| &self.docs[j])
    }
}

fn chunk(order: Vec<usize>, batch_size: usize) -> Vec<Vec<usize>> {
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn compose_corpus(
    a: Vec<Document>,
    b: Vec<Document>,
    mode: CorpusMode,
    seed: u64,
    batch_size: usize,
    seq_len: usize,
) -> Result<CorpusStream, CorpusError> {
    if batch_size == 0 || seq_len == 0 {
        return Err(CorpusError::Config(format!(
            "batch_size and seq_len must be positive (got {batch_size}, {seq_len})"
        )));
    }
    let mut rng = rng::substream(seed, rng::CORPUS_SHUFFLE);
    let na = a.len();
    let mut docs = a;
    docs.extend(b);
    let (batches, boundary) = match mode {
        CorpusMode::SequentialAB => {
            let mut oa: Vec<usize> = (0..na).collect();
            let mut ob: Vec<usize> = (na..docs.len()).collect();
            oa.shuffle(&mut rng);
            ob.shuffle(&mut rng);
            let mut batches = chunk(oa, batch_size);
            let boundary = batches.len();
            batches.extend(chunk(ob, batch_size));
            (batches, Some(boundary))
        }
        CorpusMode::MixedShuffled => {
            let mut o: Vec<usize> = (0..docs.len()).collect();
            o.shuffle(&mut rng);
            (chunk(o, batch_size), None)
        }
    };
    Ok(CorpusStream { docs, batches, batch_size, seq_len, shuffle_seed: seed, boundary })
}

/// Packs documents head-to-tail as `BOS d1 BOS d2 ...` and cuts the stream into
/// rows of `seq_len` tokens. Consecutive rows overlap by one token so every
/// stream token after the first is a prediction target exactly once.
pub fn pack_batch<'a, I>(docs: I, seq_len: usize) -> Batch
where
    I: IntoIterator<Item = &'a [TokenId]>,
{
    assert!(seq_len >= 2, "seq_len must be at least 2");
    let mut stream = Vec::new();
    for d in docs {
        stream.push(Vocab::BOS);
        stream.extend_from_slice(d);
    }
    let mut rows = Vec::new();
    let mut mask = Vec::new();
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + seq_len).min(stream.len());
        let mut row = stream[start..end].to_vec();
        let mut m = vec![true; row.len() - 1];
        m.push(false);
        row.resize(seq_len, Vocab::PAD);
        m.resize(seq_len, false);
        rows.push(row);
        mask.push(m);
        start = end - 1;
    }
    Batch::new(rows, mask)
}

/// A document sampled for the segmented eval set, with the 1-based base step
/// at which it is trained.
#[derive(Debug, Clone)]
pub struct SampledDoc {
    pub step: usize,
    pub doc: Document,
}

/// Splits the step range into `segments` contiguous slices and samples
/// `floor(fraction * |slice|)` documents from each, keeping training order.
pub fn segment_eval_set(
    stream: &CorpusStream,
    fraction: (u64, u64),
    segments: usize,
    seed: u64,
) -> Result<Vec<SampledDoc>, CorpusError> {
    let (num, den) = fraction;
    if num == 0 || den == 0 || num > den {
        return Err(CorpusError::Config(format!("fraction must lie in (0, 1], got {num}/{den}")));
    }
    if segments == 0 {
        return Err(CorpusError::Config("eval_segments must be positive".into()));
    }
    let nb = stream.num_batches();
    let segments = segments.min(nb.max(1));
    let mut rng = rng::substream(seed, rng::EVAL_SAMPLE);
    let mut out = Vec::new();
    let mut first = 0;
    for s in 0..segments {
        let len = nb / segments + usize::from(s < nb % segments);
        let members: Vec<(usize, usize)> = (first..first + len)
            .flat_map(|b| stream.batches[b].iter().map(move |&d| (b + 1, d)))
            .collect();
        first += len;
        let take = ((num as u128 * members.len() as u128) / den as u128) as usize;
        let mut picked = index::sample(&mut rng, members.len(), take).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| {
            let (step, d) = members[i];
            SampledDoc { step, doc: stream.docs[d].clone() }
        }));
    }
    Ok(out)
}
