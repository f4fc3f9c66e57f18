//! Pre-training runs with optional replay, the upper-bound protocol, and
//! the per-run output directory.

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use super::config::{RunConfig, Strategy};
use super::data::Dataset;
use crate::corpus::{compose_corpus, pack_batch, CorpusStream, TokenId};
use crate::memory::{Memory, Sample};
use crate::metrics::{build_entity_evalset, evaluate, filter_memorized, m_ex, EvalItem, MetricReport, MetricsCsv, Mode};
use crate::model::{init_model, lr_at, save_checkpoint, Batch, ModelError, ModelState};
use crate::rng;

pub const METRICS_FILE: &str = "metrics.csv";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const EVENTS_FILE: &str = "events.log";
pub const MEMORY_FILE: &str = "memory.jsonl";
pub const CONFIG_FILE: &str = "config.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Windows per update when training directly on eval items.
const WINDOW_BATCH: usize = 16;

/// Update counts of one run. `tokens_seen` counts base-training targets only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunLedger {
    pub base_updates: u64,
    pub replay_updates: u64,
    pub replay_events: u64,
    /// Scheduled events that found nothing eligible in memory.
    pub skipped_events: u64,
    pub tokens_seen: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub ratio: f64,
    /// 1 + f/T
    pub expected: f64,
    /// f / base_updates, the slack left by a final partial interval.
    pub bound: f64,
    pub within_bound: bool,
}

/// Total over base updates, checked against 1 + f/T. Runs without replay
/// expect exactly 1.
pub fn cost_report(ledger: &RunLedger, f: u32, interval: u64, replays: bool) -> Result<CostReport> {
    if ledger.base_updates == 0 {
        bail!("cost report needs at least one base update");
    }
    let base = ledger.base_updates as f64;
    let ratio = (ledger.base_updates + ledger.replay_updates) as f64 / base;
    let (expected, bound) = if replays { (1.0 + f64::from(f) / interval as f64, f64::from(f) / base) } else { (1.0, 0.0) };
    Ok(CostReport { ratio, expected, bound, within_bound: (ratio - expected).abs() <= bound + 1e-12 })
}

/// Append-only outputs of one run directory.
pub struct RunDir {
    pub path: PathBuf,
    metrics: BufWriter<File>,
    events: BufWriter<File>,
}

impl RunDir {
    pub fn create(path: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        fs::write(path.join(CONFIG_FILE), cfg.to_text())?;
        let mut metrics = BufWriter::new(File::create(path.join(METRICS_FILE))?);
        writeln!(metrics, "{}", MetricsCsv::header())?;
        metrics.flush()?;
        let events = BufWriter::new(File::create(path.join(EVENTS_FILE))?);
        Ok(RunDir { path: path.to_path_buf(), metrics, events })
    }

    pub fn row(&mut self, r: &MetricReport) -> Result<()> {
        writeln!(self.metrics, "{}", MetricsCsv::row(r))?;
        self.metrics.flush()?;
        Ok(())
    }

    pub fn marker(&mut self, step: u64, tokens: u64, tag: &str) -> Result<()> {
        writeln!(self.metrics, "{}", MetricsCsv::marker(step, tokens, tag))?;
        self.metrics.flush()?;
        Ok(())
    }

    /// One event line stamped with the logical step.
    pub fn event(&mut self, step: u64, kind: &str, detail: &str) -> Result<()> {
        if detail.is_empty() {
            writeln!(self.events, "step={step} {kind}")?;
        } else {
            writeln!(self.events, "step={step} {kind} {detail}")?;
        }
        self.events.flush()?;
        Ok(())
    }

    pub fn ledger(&mut self, l: &RunLedger, c: &CostReport) -> Result<()> {
        let text = format!(
            "base_updates,replay_updates,replay_events,skipped_events,tokens_seen,ratio,expected_ratio,within_bound\n\
             {},{},{},{},{},{:.12},{:.12},{}\n",
            l.base_updates, l.replay_updates, l.replay_events, l.skipped_events, l.tokens_seen, c.ratio, c.expected, c.within_bound
        );
        fs::write(self.path.join(LEDGER_FILE), text)?;
        Ok(())
    }

    pub fn checkpoint(&self, name: &str, state: &ModelState) -> Result<()> {
        let p = self.path.join(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        save_checkpoint(state, &p)?;
        Ok(())
    }
}

/// Parses `ledger.csv` back into counts and the ratio.
pub fn read_ledger(path: &Path) -> Result<(RunLedger, f64)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let row = text.lines().nth(1).context("ledger has no data row")?;
    let f: Vec<&str> = row.split(',').collect();
    if f.len() != 8 {
        bail!("{}: expected 8 ledger fields, got {}", path.display(), f.len());
    }
    let n = |i: usize| f[i].parse::<u64>().with_context(|| format!("ledger field {i}"));
    let l = RunLedger {
        base_updates: n(0)?,
        replay_updates: n(1)?,
        replay_events: n(2)?,
        skipped_events: n(3)?,
        tokens_seen: n(4)?,
    };
    Ok((l, f[5].parse()?))
}

/// Keeps at most `max` inclusive/exclusive pairs, chosen by a fixed hash of
/// the pair id so the subset does not alias with regular structure in the
/// corpus. 0 keeps everything.
pub fn cap_pairs(items: &[EvalItem], max: usize) -> Vec<EvalItem> {
    let pairs: BTreeSet<u64> = items.iter().map(|it| it.pair_id).collect();
    if max == 0 || pairs.len() <= max {
        return items.to_vec();
    }
    let mut ranked: Vec<u64> = pairs.into_iter().collect();
    ranked.sort_by_key(|&p| (rng::splitmix(p), p));
    let keep: BTreeSet<u64> = ranked.into_iter().take(max).collect();
    items.iter().filter(|it| keep.contains(&it.pair_id)).cloned().collect()
}

/// The entity eval set for `ds`, capped per the config.
pub fn eval_items(ds: &Dataset, cfg: &RunConfig) -> Result<Vec<EvalItem>> {
    let items = build_entity_evalset(&ds.a, &ds.b, &ds.dict)
        .context("building the entity eval set (check the dictionary against both corpora)")?;
    Ok(cap_pairs(&items, cfg.eval_max_pairs))
}

/// Distinct 64-token windows of `items`, first occurrence order.
pub fn item_windows(items: &[EvalItem]) -> Vec<Vec<TokenId>> {
    let mut seen = HashSet::new();
    items.iter().map(EvalItem::window).filter(|w| seen.insert(w.clone())).collect()
}

/// `epochs` passes over `windows` in fixed order at a constant learning rate.
/// Returns the number of updates.
pub fn train_on_windows(model: &mut ModelState, windows: &[Vec<TokenId>], epochs: u32, lr: f64) -> Result<u64, ModelError> {
    let batches: Vec<Batch> = windows.chunks(WINDOW_BATCH).map(Batch::from_sequences).collect();
    let mut n = 0;
    for _ in 0..epochs {
        for b in &batches {
            model.train_step_with_lr(b, lr)?;
            n += 1;
        }
    }
    Ok(n)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    if epoch == 0 {
        seed
    } else {
        rng::splitmix(seed ^ (epoch as u64).rotate_left(32))
    }
}

/// Base training plus scheduled replay, one base step at a time.
#[derive(Clone)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub seed: u64,
    streams: Vec<CorpusStream>,
    pub model: ModelState,
    /// Base steps taken so far.
    pub step: u64,
    pub ledger: RunLedger,
    pub memory: Option<Memory>,
}

impl Trainer {
    /// Streams for `epochs` passes; the lr schedule spans `schedule_steps`
    /// base steps, or all of them when `None`.
    pub fn new(cfg: &RunConfig, ds: &Dataset, seed: u64, epochs: usize, schedule_steps: Option<u64>) -> Result<Self> {
        let streams = (0..epochs)
            .map(|e| compose_corpus(ds.a.clone(), ds.b.clone(), cfg.corpus_mode, epoch_seed(seed, e), cfg.batch_size, cfg.seq_len))
            .collect::<Result<Vec<_>, _>>()?;
        let per_epoch = streams.first().map_or(0, CorpusStream::num_batches) as u64;
        if per_epoch == 0 {
            bail!("corpus produced no batches");
        }
        let mut mc = cfg.model;
        mc.total_steps = schedule_steps.unwrap_or(per_epoch * epochs as u64).max(mc.warmup_steps);
        mc.init_seed = seed;
        let model = init_model(&mc)?;
        let memory = match cfg.strategy.replay_policy() {
            Some((storage, retrieval)) => Some(Memory::new(storage, retrieval, cfg.exit_threshold(), cfg.memory_capacity)?),
            None => None,
        };
        Ok(Trainer { cfg: cfg.clone(), seed, streams, model, step: 0, ledger: RunLedger::default(), memory })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.streams[0].num_batches() as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.streams.len() as u64
    }

    /// Base step at which the first epoch switches from A to B, if sequential.
    pub fn boundary(&self) -> Option<u64> {
        self.streams[0].boundary().map(|b| b as u64)
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.step, &self.model.config)
    }

    /// One base update, then a replay event when the step is a multiple of
    /// the interval.
    pub fn base_step(&mut self, out: &mut RunDir) -> Result<f64> {
        let per = self.steps_per_epoch();
        if self.step >= self.total_steps() {
            bail!("stream exhausted after {} base steps", self.step);
        }
        let lr = self.lr();
        let stream = &self.streams[(self.step / per) as usize];
        let docs = stream.batch((self.step % per) as usize);
        let batch = pack_batch(docs.iter().map(|d| d.tokens.as_slice()), self.cfg.seq_len);
        let loss = self.model.train_step_with_lr(&batch, lr)?;
        self.step += 1;
        self.ledger.base_updates += 1;
        self.ledger.tokens_seen += batch.masked_count() as u64;
        let step = self.step;
        if let Some(mem) = self.memory.as_mut() {
            if step.is_multiple_of(self.cfg.replay_interval) {
                let queries: Vec<&[TokenId]> = docs.iter().map(|d| d.tokens.as_slice()).collect();
                let ids = mem.retrieve(&queries, self.cfg.batch_size, rng::splitmix(self.seed).wrapping_add(step));
                if ids.is_empty() {
                    self.ledger.skipped_events += 1;
                    out.event(step, "replay_skipped", "eligible=0")?;
                } else {
                    let rb = pack_batch(ids.iter().map(|&id| mem.tokens(id).expect("retrieved ids are stored")), self.cfg.seq_len);
                    let f = self.cfg.f();
                    for _ in 0..f {
                        self.model.train_step_with_lr(&rb, lr)?;
                        self.ledger.replay_updates += 1;
                    }
                    mem.mark_replayed(&ids)?;
                    self.ledger.replay_events += 1;
                    let bad = mem.violations();
                    if !bad.is_empty() {
                        bail!("memory invariant broken after replay at step {step}: {}", bad.join("; "));
                    }
                    out.event(step, "replay", &format!("event={} retrieved={} updates={f}", self.ledger.replay_events, ids.len()))?;
                }
            }
            let samples: Vec<Sample<'_>> = docs.iter().map(|d| Sample::from(*d)).collect();
            mem.store(&samples, None, step)?;
        }
        Ok(loss)
    }
}

/// Everything a finished run hands back.
#[derive(Clone)]
pub struct RunResult {
    pub reports: Vec<MetricReport>,
    pub ledger: RunLedger,
    pub cost: CostReport,
    pub model: ModelState,
    pub memory: Option<Memory>,
    /// Items evaluated at the end; the retained subset after filtering.
    pub items: Vec<EvalItem>,
    pub upper_bound_epochs: Option<u32>,
}

fn abort<T>(out: &mut RunDir, t: &Trainer, err: anyhow::Error) -> Result<T> {
    out.marker(t.step, t.ledger.tokens_seen, "aborted")?;
    out.event(t.step, "aborted", &err.to_string().replace('\n', " "))?;
    Err(err.context(format!("run aborted at base step {}; partial outputs in {}", t.step, out.path.display())))
}

/// Pre-training over `cfg.epochs` passes with the strategy's replay, the
/// eval cadence, the A→B boundary protocol and, for `upper_bound`, the
/// final direct training on the eval items.
pub fn run_pretraining(cfg: &RunConfig, ds: &Dataset, items: &[EvalItem], seed: u64, out_dir: &Path) -> Result<RunResult> {
    if items.is_empty() {
        bail!("eval item set is empty");
    }
    let mut out = RunDir::create(out_dir, cfg)?;
    let mut t = Trainer::new(cfg, ds, seed, cfg.epochs, None)?;
    let mut items = items.to_vec();
    let mut reports = Vec::new();
    let total = t.total_steps();
    let boundary = t.boundary();
    out.event(0, "start", &format!("strategy={} seed={seed} base_steps={total}", cfg.strategy))?;
    while t.step < total {
        if let Err(e) = t.base_step(&mut out) {
            return abort(&mut out, &t, e);
        }
        let step = t.step;
        let tag = if Some(step) == boundary {
            if cfg.filter_memorized {
                let before = items.len() / 2;
                items = filter_memorized(&t.model, &items)?;
                out.event(step, "filter_memorized", &format!("pairs_before={before} pairs_kept={}", items.len() / 2))?;
                if items.is_empty() {
                    bail!(
                        "eval set empty after filtering at the A→B boundary: no pair is memorized; \
                         enlarge A, raise entity frequency in A, or adjust the dictionary"
                    );
                }
            }
            Some("boundary")
        } else if step == total {
            Some("final")
        } else if step % cfg.eval_every == 0 {
            Some("")
        } else {
            None
        };
        if let Some(tag) = tag {
            let r = evaluate(&t.model, &items, step, t.ledger.tokens_seen, tag)?;
            out.row(&r)?;
            out.event(step, "eval", &format!("tag={tag} m_ex={:.6} ppl={:.6}", r.m_ex, r.ppl))?;
            reports.push(r);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != total {
            out.checkpoint(&format!("checkpoints/step_{step:08}.ckpt"), &t.model)?;
        }
    }
    out.checkpoint(FINAL_CHECKPOINT, &t.model)?;
    let mut ub_epochs = None;
    if cfg.strategy == Strategy::UpperBound {
        let (r, n) = upper_bound_phase(&mut t.model, &items, cfg, t.step, t.ledger.tokens_seen, &mut out)?;
        out.row(&r)?;
        out.checkpoint("upper_bound.ckpt", &t.model)?;
        reports.push(r);
        ub_epochs = Some(n);
    }
    let cost = cost_report(&t.ledger, cfg.f(), cfg.replay_interval, cfg.strategy.replay_policy().is_some())?;
    out.ledger(&t.ledger, &cost)?;
    if let Some(mem) = &t.memory {
        mem.dump(&out.path.join(MEMORY_FILE))?;
    }
    out.event(t.step, "done", &format!("base_updates={} replay_updates={}", t.ledger.base_updates, t.ledger.replay_updates))?;
    Ok(RunResult { reports, ledger: t.ledger, cost, model: t.model, memory: t.memory, items, upper_bound_epochs: ub_epochs })
}

/// Trains on the items' windows until M_ex stops improving between epochs
/// or the epoch cap is reached, then evaluates once. Returns the row and
/// the epoch count.
fn upper_bound_phase(
    model: &mut ModelState,
    items: &[EvalItem],
    cfg: &RunConfig,
    step: u64,
    tokens: u64,
    out: &mut RunDir,
) -> Result<(MetricReport, u32)> {
    let windows = item_windows(items);
    let lr = cfg.upper_bound_lr.unwrap_or(cfg.model.max_lr);
    let ex = exclusive_only(items);
    let mut best = m_ex(model, &ex)?;
    let mut epochs = 0;
    while epochs < cfg.upper_bound_epochs {
        train_on_windows(model, &windows, 1, lr)?;
        epochs += 1;
        let cur = m_ex(model, &ex)?;
        out.event(step, "upper_bound_epoch", &format!("epoch={epochs} m_ex={cur:.6}"))?;
        if cur <= best {
            break;
        }
        best = cur;
    }
    Ok((evaluate(model, items, step, tokens, "upper_bound")?, epochs))
}

pub fn exclusive_only(items: &[EvalItem]) -> Vec<EvalItem> {
    items.iter().filter(|i| i.mode == Mode::Exclusive).cloned().collect()
}

/// Upper-bound protocol from a saved checkpoint.
pub fn run_upper_bound(checkpoint: &Path, items: &[EvalItem], cfg: &RunConfig, out_dir: &Path) -> Result<(MetricReport, u32)> {
    if !checkpoint.exists() {
        bail!("missing checkpoint {}", checkpoint.display());
    }
    let mut model = crate::model::load_checkpoint(checkpoint)?;
    let mut out = RunDir::create(out_dir, cfg)?;
    let step = model.step;
    let (r, n) = upper_bound_phase(&mut model, items, cfg, step, 0, &mut out)?;
    out.row(&r)?;
    out.checkpoint("upper_bound.ckpt", &model)?;
    Ok((r, n))
}

/// Runs every configured seed. One seed writes into `out_dir` itself;
/// several get `seed_N` subdirectories plus `summary.csv`.
pub fn run_experiment(cfg: &RunConfig, ds: &Dataset, items: &[EvalItem], out_dir: &Path) -> Result<Vec<(u64, RunResult)>> {
    cfg.validate()?;
    let mut results = Vec::new();
    if cfg.seeds.len() == 1 {
        let s = cfg.seeds[0];
        results.push((s, run_pretraining(cfg, ds, items, s, out_dir)?));
        return Ok(results);
    }
    for &s in &cfg.seeds {
        results.push((s, run_pretraining(cfg, ds, items, s, &out_dir.join(format!("seed_{s}")))?));
    }
    write_summary(&out_dir.join("summary.csv"), cfg.strategy, &results)?;
    Ok(results)
}

fn write_summary(path: &Path, strategy: Strategy, results: &[(u64, RunResult)]) -> Result<()> {
    let mut text = String::from("seed,strategy,ppl,mf,m_in,m_ex,n_items,ratio\n");
    let mut sums = [0.0; 5];
    for (s, r) in results {
        let last = r.reports.last().context("run produced no rows")?;
        let vals = [last.ppl, last.mf, last.m_in, last.m_ex, r.cost.ratio];
        for (acc, v) in sums.iter_mut().zip(vals) {
            *acc += v;
        }
        text.push_str(&format!(
            "{s},{strategy},{:.9e},{:.9e},{:.9e},{:.9e},{},{:.12}\n",
            last.ppl, last.mf, last.m_in, last.m_ex, last.n_items, r.cost.ratio
        ));
    }
    let n = results.len() as f64;
    let m: Vec<f64> = sums.iter().map(|s| s / n).collect();
    text.push_str(&format!("mean,{strategy},{:.9e},{:.9e},{:.9e},{:.9e},,{:.12}\n", m[0], m[1], m[2], m[3], m[4]));
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_formula_hand_counts() {
        // f = 2, T = 4, 8 base steps: events at 4 and 8
        let l = RunLedger { base_updates: 8, replay_updates: 4, replay_events: 2, ..RunLedger::default() };
        let c = cost_report(&l, 2, 4, true).unwrap();
        assert_eq!(c.ratio, 1.5);
        assert!(c.within_bound);
        let v = RunLedger { base_updates: 10, ..RunLedger::default() };
        assert_eq!(cost_report(&v, 1, 100, false).unwrap().ratio, 1.0);
        assert!(cost_report(&RunLedger::default(), 1, 100, false).is_err());
        // 10_050 base steps, f = 5, T = 100: 100 events, final partial interval of 50
        let l = RunLedger { base_updates: 10_050, replay_updates: 500, replay_events: 100, ..RunLedger::default() };
        let c = cost_report(&l, 5, 100, true).unwrap();
        assert!((c.ratio - 1.05).abs() <= 5.0 / 10_050.0 && c.within_bound);
    }

    #[test]
    fn pair_cap_is_even_and_keeps_twins() {
        let mk = |pair: u64, mode| EvalItem {
            item_id: pair * 2 + u64::from(mode == crate::metrics::Mode::Exclusive),
            pair_id: pair,
            doc_id: 0,
            entity_id: 0,
            entity_type: crate::corpus::EntityType::Per,
            mode,
            prefix: vec![3; 32],
            target: vec![4; 32],
            entity_tokens: vec![4],
        };
        let items: Vec<EvalItem> =
            (0..10).flat_map(|p| [mk(p, crate::metrics::Mode::Inclusive), mk(p, crate::metrics::Mode::Exclusive)]).collect();
        let c = cap_pairs(&items, 4);
        assert_eq!(c.len(), 8);
        // both twins of every kept pair survive, in the original order
        for w in c.chunks(2) {
            assert_eq!(w[0].pair_id, w[1].pair_id);
            assert_eq!(w[0].mode, crate::metrics::Mode::Inclusive);
        }
        assert!(c.windows(2).all(|w| w[0].item_id < w[1].item_id));
        assert_eq!(cap_pairs(&items, 4), c);
        assert_eq!(cap_pairs(&items, 0).len(), 20);
        assert_eq!(cap_pairs(&items, 50).len(), 20);
    }
}
