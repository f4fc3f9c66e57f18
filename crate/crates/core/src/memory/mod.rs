//! Replay memory: storage policies, random and BM25 retrieval, and the exit
//! rule that retires an entry after a fixed number of replay events.

mod bm25;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bm25::InvertedIndex;

use crate::corpus::{Document, TokenId};
use crate::rng;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("sample {0} is not live in memory")]
    NotLive(u64),
    #[error("sample {0} marked twice in one replay event")]
    DoubleMark(u64),
    #[error("losses misaligned: {losses} losses for {samples} samples")]
    Misaligned { losses: usize, samples: usize },
    #[error("high_loss storage needs per-sample losses")]
    MissingLosses,
    #[error("invalid memory config: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub sample_id: u64,
    pub tokens: Vec<TokenId>,
    pub has_entity: bool,
    /// Present only when the storage policy needed it.
    pub last_loss: Option<f64>,
    pub replay_count: u32,
    pub insert_step: u64,
    /// Retired by the exit rule or the capacity cap; kept for ledger scans.
    pub evicted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StoragePolicy {
    All,
    EntityOnly,
    /// Keep the top `fraction` of each incoming batch by loss.
    HighLoss { fraction: f64 },
}

impl StoragePolicy {
    pub fn needs_losses(&self) -> bool {
        matches!(self, StoragePolicy::HighLoss { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalStrategy {
    Random,
    Bm25,
}

/// A sample offered for storage.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub id: u64,
    pub tokens: &'a [TokenId],
    pub has_entity: bool,
}

impl<'a> From<&'a Document> for Sample<'a> {
    fn from(d: &'a Document) -> Self {
        Sample { id: d.doc_id, tokens: &d.tokens, has_entity: d.has_entity() }
    }
}

#[derive(Debug, Clone)]
pub struct Memory {
    pub storage: StoragePolicy,
    pub retrieval: RetrievalStrategy,
    /// Replay events after which an entry retires; `None` disables the exit rule.
    pub max_replays: Option<u32>,
    /// Optional FIFO cap on live entries.
    pub capacity: Option<usize>,
    entries: BTreeMap<u64, MemoryEntry>,
    live: BTreeSet<u64>,
    fifo: VecDeque<u64>,
    index: InvertedIndex,
}

impl Memory {
    pub fn new(
        storage: StoragePolicy,
        retrieval: RetrievalStrategy,
        max_replays: Option<u32>,
        capacity: Option<usize>,
    ) -> Result<Self, MemoryError> {
        if let StoragePolicy::HighLoss { fraction } = storage {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(MemoryError::Config(format!("high_loss_fraction must lie in (0, 1], got {fraction}")));
            }
        }
        if max_replays == Some(0) {
            return Err(MemoryError::Config("max_replays must be >= 1".into()));
        }
        if capacity == Some(0) {
            return Err(MemoryError::Config("capacity must be >= 1".into()));
        }
        Ok(Memory {
            storage,
            retrieval,
            max_replays,
            capacity,
            entries: BTreeMap::new(),
            live: BTreeSet::new(),
            fifo: VecDeque::new(),
            index: InvertedIndex::new(),
        })
    }

    /// Number of live (eligible) entries.
    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&MemoryEntry> {
        self.entries.get(&id)
    }

    /// Every entry ever stored, evicted ones included, by id.
    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.values()
    }

    pub fn live_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.live.iter().copied()
    }

    pub fn index(&self) -> &InvertedIndex {
        &self.index
    }

    fn uses_index(&self) -> bool {
        self.retrieval == RetrievalStrategy::Bm25
    }

    /// Stores the samples selected by the policy; returns how many were
    /// inserted. Ids already present are skipped.
    pub fn store(&mut self, batch: &[Sample<'_>], losses: Option<&[f64]>, step: u64) -> Result<usize, MemoryError> {
        if let Some(l) = losses {
            if l.len() != batch.len() {
                return Err(MemoryError::Misaligned { losses: l.len(), samples: batch.len() });
            }
        }
        let chosen: Vec<usize> = match self.storage {
            StoragePolicy::All => (0..batch.len()).collect(),
            StoragePolicy::EntityOnly => (0..batch.len()).filter(|&i| batch[i].has_entity).collect(),
            StoragePolicy::HighLoss { fraction } => {
                let l = losses.ok_or(MemoryError::MissingLosses)?;
                let take = (fraction * batch.len() as f64).ceil() as usize;
                let mut order: Vec<usize> = (0..batch.len()).collect();
                order.sort_by(|&a, &b| l[b].total_cmp(&l[a]).then(a.cmp(&b)));
                order.truncate(take);
                order.sort_unstable();
                order
            }
        };
        let mut inserted = 0;
        for i in chosen {
            let s = batch[i];
            if s.tokens.is_empty() || self.entries.contains_key(&s.id) {
                continue;
            }
            self.entries.insert(
                s.id,
                MemoryEntry {
                    sample_id: s.id,
                    tokens: s.tokens.to_vec(),
                    has_entity: s.has_entity,
                    last_loss: losses.map(|l| l[i]),
                    replay_count: 0,
                    insert_step: step,
                    evicted: false,
                },
            );
            self.live.insert(s.id);
            self.fifo.push_back(s.id);
            if self.uses_index() {
                self.index.insert(s.id, s.tokens);
            }
            inserted += 1;
            self.enforce_capacity();
        }
        Ok(inserted)
    }

    fn enforce_capacity(&mut self) {
        let Some(cap) = self.capacity else { return };
        while self.live.len() > cap {
            let Some(old) = self.fifo.pop_front() else { break };
            if self.live.contains(&old) {
                self.retire(old);
            }
        }
    }

    fn retire(&mut self, id: u64) {
        self.live.remove(&id);
        if let Some(e) = self.entries.get_mut(&id) {
            e.evicted = true;
        }
        if self.uses_index() {
            self.index.remove(id);
        }
    }

    /// Up to `k` live entries for the next replay batch.
    ///
    /// Random: a uniform sample without replacement drawn from `seed`.
    /// BM25: each query's best entry in query order, duplicates dropped, then
    /// backfilled by the best score any query gave, then by ascending id.
    pub fn retrieve(&self, queries: &[&[TokenId]], k: usize, seed: u64) -> Vec<u64> {
        if k == 0 || self.live.is_empty() {
            return Vec::new();
        }
        let live: Vec<u64> = self.live.iter().copied().collect();
        match self.retrieval {
            RetrievalStrategy::Random => {
                let mut rng = rng::substream(seed, rng::RETRIEVAL);
                let mut picks = index::sample(&mut rng, live.len(), k.min(live.len())).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(|i| live[i]).collect()
            }
            RetrievalStrategy::Bm25 => {
                let mut chosen: Vec<u64> = Vec::with_capacity(k);
                let mut best: BTreeMap<u64, f64> = BTreeMap::new();
                for q in queries.iter().take(k) {
                    let scores = self.index.score_all(q);
                    let mut top: Option<(u64, f64)> = None;
                    for (&id, &s) in &scores {
                        let b = best.entry(id).or_insert(s);
                        *b = b.max(s);
                        if s > 0.0 && !chosen.contains(&id) && top.is_none_or(|(_, ts)| s > ts) {
                            top = Some((id, s));
                        }
                    }
                    if let Some((id, _)) = top {
                        chosen.push(id);
                    }
                }
                if chosen.len() < k {
                    let mut rest: Vec<(u64, f64)> = best.into_iter().filter(|(id, _)| !chosen.contains(id)).collect();
                    rest.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    chosen.extend(rest.into_iter().map(|(id, _)| id).take(k - chosen.len()));
                }
                if chosen.len() < k {
                    let missing: Vec<u64> = live.iter().copied().filter(|id| !chosen.contains(id)).take(k - chosen.len()).collect();
                    chosen.extend(missing);
                }
                chosen
            }
        }
    }

    /// Counts one replay event for each id; entries reaching the exit
    /// threshold retire.
    pub fn mark_replayed(&mut self, ids: &[u64]) -> Result<(), MemoryError> {
        let mut seen = BTreeSet::new();
        for &id in ids {
            if !self.live.contains(&id) {
                return Err(MemoryError::NotLive(id));
            }
            if !seen.insert(id) {
                return Err(MemoryError::DoubleMark(id));
            }
        }
        for &id in ids {
            let e = self.entries.get_mut(&id).expect("live entries exist");
            e.replay_count += 1;
            if self.max_replays.is_some_and(|m| e.replay_count >= m) {
                self.retire(id);
            }
        }
        Ok(())
    }

    pub fn tokens(&self, id: u64) -> Option<&[TokenId]> {
        self.entries.get(&id).map(|e| e.tokens.as_slice())
    }

    /// Checks the bookkeeping invariants, returning every violation found.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Some(m) = self.max_replays {
            for e in self.entries.values().filter(|e| e.replay_count > m) {
                v.push(format!("sample {} replayed {} > {m} times", e.sample_id, e.replay_count));
            }
        }
        for e in self.entries.values() {
            if e.evicted == self.live.contains(&e.sample_id) {
                v.push(format!("sample {} liveness flag disagrees with the live set", e.sample_id));
            }
        }
        if self.uses_index() {
            let indexed: BTreeSet<u64> = self.index.ids().collect();
            if indexed != self.live {
                v.push("index ids differ from live ids".into());
            }
        }
        v
    }

    /// Counts of (live, evicted) entries per replay count.
    pub fn histogram(&self) -> BTreeMap<u32, (usize, usize)> {
        let mut h: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
        for e in self.entries.values() {
            let slot = h.entry(e.replay_count).or_default();
            if e.evicted {
                slot.1 += 1;
            } else {
                slot.0 += 1;
            }
        }
        h
    }

    /// Writes every entry as one JSON line, in id order.
    pub fn dump(&self, path: &Path) -> Result<(), MemoryError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for e in self.entries.values() {
            serde_json::to_writer(&mut w, e).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reloads entries written by [`Memory::dump`]; the index is rebuilt.
    /// FIFO order is approximated by (insert_step, id).
    pub fn restore(
        path: &Path,
        storage: StoragePolicy,
        retrieval: RetrievalStrategy,
        max_replays: Option<u32>,
        capacity: Option<usize>,
    ) -> Result<Self, MemoryError> {
        let mut m = Memory::new(storage, retrieval, max_replays, capacity)?;
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut order = Vec::new();
        for (n, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: MemoryEntry = serde_json::from_str(&line).map_err(|err| MemoryError::Parse {
                path: path.display().to_string(),
                line: n + 1,
                msg: err.to_string(),
            })?;
            if !e.evicted {
                m.live.insert(e.sample_id);
                order.push((e.insert_step, e.sample_id));
                if m.uses_index() {
                    m.index.insert(e.sample_id, &e.tokens);
                }
            }
            m.entries.insert(e.sample_id, e);
        }
        order.sort_unstable();
        m.fifo = order.into_iter().map(|(_, id)| id).collect();
        Ok(m)
    }

    /// Human-readable eligibility histogram.
    pub fn histogram_report(&self) -> String {
        let mut s = String::from("replay_count,live,evicted\n");
        for (c, (l, e)) in self.histogram() {
            s.push_str(&format!("{c},{l},{e}\n"));
        }
        s
    }
}
