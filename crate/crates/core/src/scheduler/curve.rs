//! Forgetting curves: intensive learning of one difficulty bucket, then
//! resumed pre-training with optional periodic replay sessions.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};

use super::config::{RunConfig, Strategy};
use super::data::Dataset;
use super::run::{item_windows, train_on_windows, RunDir, Trainer, FINAL_CHECKPOINT};
use crate::corpus::CorpusMode;
use crate::metrics::{bucket_by_difficulty, evaluate, per_entity_accuracy, DifficultyBucket, EvalItem, MetricReport};

/// One curve: which intensity, whether periodic sessions ran, and its rows.
#[derive(Debug, Clone)]
pub struct Curve {
    pub intensive_epochs: u32,
    pub periodic: bool,
    pub bucket: usize,
    /// Row right after the intensive phase, then the resumed-training rows.
    pub reports: Vec<MetricReport>,
    pub sessions: u64,
    pub file: PathBuf,
}

impl Curve {
    pub fn name(bucket: usize, e: u32, periodic: bool) -> String {
        format!("curve_b{bucket}_e{e}{}.csv", if periodic { "_periodic" } else { "" })
    }

    /// M_ex immediately after the intensive phase.
    pub fn after_intensive(&self) -> f64 {
        self.reports[0].m_ex
    }

    pub fn final_m_ex(&self) -> f64 {
        self.reports.last().map_or(f64::NAN, |r| r.m_ex)
    }
}

#[derive(Debug, Clone)]
pub struct CurveOutcome {
    pub buckets: Vec<DifficultyBucket>,
    pub curves: Vec<Curve>,
}

/// Base pre-training, difficulty buckets from the base checkpoint, then one
/// curve per configured intensity (and a periodic curve when enabled). Each
/// curve is written to its own CSV in `out_dir`.
///
/// In sequential mode the base phase is corpus A and the resumed phase runs
/// into B; otherwise the base phase is `cfg.epochs` full passes and the
/// resumed phase continues with further passes. `curve_steps` overrides the
/// resumed length.
pub fn run_forgetting_curve(cfg: &RunConfig, ds: &Dataset, items: &[EvalItem], seed: u64, out_dir: &Path) -> Result<CurveOutcome> {
    cfg.validate()?;
    if items.is_empty() {
        bail!("eval item set is empty");
    }
    let c = &cfg.curve;
    let mut base_cfg = cfg.clone();
    base_cfg.strategy = Strategy::Vanilla;
    let mut out = RunDir::create(out_dir, &base_cfg)?;
    let probe = Trainer::new(&base_cfg, ds, seed, 1, None)?;
    let per_epoch = probe.steps_per_epoch();
    let (base_steps, natural_resume) = match (cfg.corpus_mode, probe.boundary()) {
        (CorpusMode::SequentialAB, Some(b)) => (b, per_epoch - b),
        _ => (per_epoch * cfg.epochs as u64, per_epoch),
    };
    drop(probe);
    let resume = if c.curve_steps == 0 { natural_resume } else { c.curve_steps };
    if resume == 0 {
        bail!("nothing to resume after the base phase; set curve_steps");
    }
    let epochs = (base_steps + resume).div_ceil(per_epoch) as usize;
    // the schedule spans base training and the resumed phase
    let mut t = Trainer::new(&base_cfg, ds, seed, epochs, Some(base_steps + resume))?;
    while t.step < base_steps {
        t.base_step(&mut out)?;
    }
    let base_row = evaluate(&t.model, items, t.step, t.ledger.tokens_seen, "base")?;
    out.row(&base_row)?;
    out.checkpoint(FINAL_CHECKPOINT, &t.model)?;

    let acc = per_entity_accuracy(&t.model, items)?;
    let buckets = bucket_by_difficulty(&acc, c.difficulty_buckets)?;
    let bucket = &buckets[c.bucket];
    for b in &buckets {
        out.event(
            t.step,
            "bucket",
            &format!("id={} entities={} mean_accuracy={:.6}", b.bucket_id, b.entity_ids.len(), b.mean_accuracy),
        )?;
    }
    let chosen: Vec<EvalItem> = items.iter().filter(|i| bucket.entity_ids.contains(&i.entity_id)).cloned().collect();
    let mut curves = Vec::new();
    if chosen.is_empty() {
        out.marker(t.step, t.ledger.tokens_seen, &format!("empty_bucket_{}", c.bucket))?;
        out.event(t.step, "warning", &format!("bucket {} has no items; skipped", c.bucket))?;
        return Ok(CurveOutcome { buckets, curves });
    }
    let windows = item_windows(&chosen);
    let lr = c.curve_lr.unwrap_or(cfg.model.max_lr);
    let mut variants: Vec<(u32, bool)> = c.intensive_epochs.iter().map(|&e| (e, false)).collect();
    if c.periodic {
        let from = c.periodic_from.unwrap_or_else(|| *c.intensive_epochs.iter().max().expect("validated non-empty"));
        variants.push((from, true));
    }
    for (e, periodic) in variants {
        let label = format!("e={e}{}", if periodic { " periodic" } else { "" });
        let mut run = t.clone();
        let mut curve_out = CurveFile::create(&out_dir.join(Curve::name(c.bucket, e, periodic)))?;
        train_on_windows(&mut run.model, &windows, e, lr)?;
        out.event(run.step, "intensive", &format!("{label} epochs={e} windows={}", windows.len()))?;
        let mut reports = vec![evaluate(&run.model, &chosen, run.step, run.ledger.tokens_seen, "intensive")?];
        curve_out.row(&reports[0])?;
        let mut sessions = 0;
        for s in 1..=resume {
            run.base_step(&mut out)?;
            if periodic && s % c.periodic_interval == 0 {
                train_on_windows(&mut run.model, &windows, c.periodic_epochs, lr)?;
                sessions += 1;
                out.event(run.step, "periodic_replay", &format!("{label} session={sessions} epochs={}", c.periodic_epochs))?;
            }
            let tag = if s == resume {
                "final"
            } else if s % c.curve_eval_every == 0 {
                ""
            } else {
                continue;
            };
            let r = evaluate(&run.model, &chosen, run.step, run.ledger.tokens_seen, tag)?;
            curve_out.row(&r)?;
            reports.push(r);
        }
        out.event(run.step, "curve_done", &format!("{label} m_ex_after_intensive={:.6}", reports[0].m_ex))?;
        curves.push(Curve { intensive_epochs: e, periodic, bucket: c.bucket, reports, sessions, file: curve_out.path });
    }
    Ok(CurveOutcome { buckets, curves })
}

struct CurveFile {
    path: PathBuf,
    w: std::io::BufWriter<std::fs::File>,
}

impl CurveFile {
    fn create(path: &Path) -> Result<Self> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{}", crate::metrics::MetricsCsv::header())?;
        Ok(CurveFile { path: path.to_path_buf(), w })
    }

    fn row(&mut self, r: &MetricReport) -> Result<()> {
        use std::io::Write;
        writeln!(self.w, "{}", crate::metrics::MetricsCsv::row(r))?;
        self.w.flush()?;
        Ok(())
    }
}
