mod common;

use std::fs;
use std::path::Path;

use common::{micro_config, micro_dataset, micro_synth, MICRO_VOCAB};
use forgetrace::memory::MemoryEntry;
use forgetrace::metrics::{evaluate, m_ex, read_metrics_csv, MetricsCsv};
use forgetrace::model::{load_checkpoint, save_checkpoint};
use forgetrace::scheduler::run::{exclusive_only, read_ledger, EVENTS_FILE, LEDGER_FILE, MEMORY_FILE, METRICS_FILE};
use forgetrace::scheduler::{
    eval_items, item_windows, run_forgetting_curve, run_pretraining, run_upper_bound, train_on_windows, Dataset, Strategy,
};
use forgetrace::synth::{generate, SynthConfig};

fn events(dir: &Path, kind: &str) -> Vec<u64> {
    fs::read_to_string(dir.join(EVENTS_FILE))
        .unwrap()
        .lines()
        .filter_map(|l| {
            let mut parts = l.split_whitespace();
            let step = parts.next()?.strip_prefix("step=")?.parse().ok()?;
            (parts.next()? == kind).then_some(step)
        })
        .collect()
}

fn memory_entries(dir: &Path) -> Vec<MemoryEntry> {
    fs::read_to_string(dir.join(MEMORY_FILE)).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn f2_t4_micro_run_costs_exactly_one_and_a_half() {
    let ds = micro_dataset();
    let cfg = micro_config(Strategy::FocusedStochastic, "replay_epochs = 2\nreplay_interval = 4\nepochs = 2\n");
    let items = eval_items(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = run_pretraining(&cfg, &ds, &items, 1, dir.path()).unwrap();
    assert_eq!(r.ledger.base_updates % 4, 0);
    assert_eq!(r.ledger.skipped_events, 0);
    assert_eq!(r.cost.ratio, 1.5);
    // ledger identity against the optimizer's own update counter
    assert_eq!(r.ledger.base_updates + r.ledger.replay_updates, r.model.step);
    let (on_disk, ratio) = read_ledger(&dir.path().join(LEDGER_FILE)).unwrap();
    assert_eq!(on_disk, r.ledger);
    assert_eq!(ratio, 1.5);
}

#[test]
fn f5_t100_over_ten_thousand_steps_costs_one_point_oh_five() {
    let sc = SynthConfig { n_a_docs: 400, n_b_docs: 400, ..micro_synth() };
    let ds = Dataset::from_synth(&generate(&sc).unwrap(), MICRO_VOCAB).unwrap();
    let cfg = micro_config(Strategy::IntensiveFocused, "replay_interval = 100\nepochs = 50\neval_every = 100000\n");
    assert_eq!(cfg.f(), 5);
    let items = eval_items(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = run_pretraining(&cfg, &ds, &items, 2, dir.path()).unwrap();
    assert!(r.ledger.base_updates >= 10_000, "{} base steps", r.ledger.base_updates);
    let expect = 1.0 + 5.0 / 100.0;
    let bound = 5.0 / r.ledger.base_updates as f64;
    assert!((r.cost.ratio - expect).abs() <= bound + 1e-12, "ratio {}", r.cost.ratio);
    assert!(r.cost.within_bound);
    assert_eq!(r.ledger.base_updates + r.ledger.replay_updates, r.model.step);
    // one event per session, every multiple of the interval
    assert_eq!(r.ledger.replay_events + r.ledger.skipped_events, r.ledger.base_updates / 100);
}

#[test]
fn vanilla_ratio_is_exactly_one() {
    let ds = micro_dataset();
    let cfg = micro_config(Strategy::Vanilla, "");
    let items = eval_items(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = run_pretraining(&cfg, &ds, &items, 1, dir.path()).unwrap();
    assert_eq!(r.cost.ratio, 1.0);
    assert_eq!(r.ledger.replay_updates, 0);
    assert!(!dir.path().join(MEMORY_FILE).exists());
}

#[test]
fn focused_replay_never_exceeds_the_exit_threshold() {
    let ds = micro_dataset();
    let cfg = micro_config(Strategy::FocusedStochastic, "replay_interval = 2\nepochs = 3\n");
    let items = eval_items(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_pretraining(&cfg, &ds, &items, 4, dir.path()).unwrap();
    let entries = memory_entries(dir.path());
    assert!(entries.iter().all(|e| e.replay_count <= 5));
    // the run was long enough for the rule to bite
    let retired: Vec<_> = entries.iter().filter(|e| e.evicted).collect();
    assert!(!retired.is_empty());
    assert!(retired.iter().all(|e| e.replay_count == 5));
    assert!(entries.iter().all(|e| e.has_entity));
}

#[test]
fn replay_events_land_on_interval_multiples() {
    let ds = micro_dataset();
    let cfg = micro_config(Strategy::Bm25All, "replay_interval = 7\nepochs = 2\n");
    let items = eval_items(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = run_pretraining(&cfg, &ds, &items, 5, dir.path()).unwrap();
    let steps = events(dir.path(), "replay");
    assert!(steps.iter().all(|s| s % 7 == 0));
    assert_eq!(steps.len() as u64, r.ledger.replay_events);
    let skipped = events(dir.path(), "replay_skipped");
    let mut all: Vec<u64> = steps.into_iter().chain(skipped).collect();
    all.sort_unstable();
    let expect: Vec<u64> = (1..=r.ledger.base_updates / 7).map(|k| 7 * k).collect();
    assert_eq!(all, expect);
}

#[test]
fn replay_that_never_fires_reproduces_vanilla() {
    let ds = micro_dataset();
    let van = micro_config(Strategy::Vanilla, "");
    let items = eval_items(&ds, &van).unwrap();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = run_pretraining(&van, &ds, &items, 9, d1.path()).unwrap();
    let idle = micro_config(Strategy::Bm25All, "replay_interval = 1000000\n");
    let b = run_pretraining(&idle, &ds, &items, 9, d2.path()).unwrap();
    assert_eq!(a.model.checksum(), b.model.checksum());
    assert_eq!(fs::read(d1.path().join(METRICS_FILE)).unwrap(), fs::read(d2.path().join(METRICS_FILE)).unwrap());
}

#[test]
fn tokens_seen_ignores_replay() {
    let ds = micro_dataset();
    let items = eval_items(&ds, &micro_config(Strategy::Vanilla, "")).unwrap();
    let mut seen = Vec::new();
    for s in [Strategy::Vanilla, Strategy::IntensiveFocused, Strategy::Bm25Entity] {
        let dir = tempfile::tempdir().unwrap();
        let r = run_pretraining(&micro_config(s, "replay_interval = 3\n"), &ds, &items, 1, dir.path()).unwrap();
        let xs: Vec<u64> = r.reports.iter().map(|r| r.tokens_seen).collect();
        seen.push((r.ledger.tokens_seen, xs));
    }
    assert!(seen.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn evaluation_from_a_reloaded_checkpoint_matches_the_live_row() {
    let ds = micro_dataset();
    let cfg = micro_config(Strategy::IntensiveFocused, "checkpoint_every = 10\nreplay_interval = 5\n");
    let items = eval_items(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_pretraining(&cfg, &ds, &items, 3, dir.path()).unwrap();
    let rows = read_metrics_csv(&dir.path().join(METRICS_FILE)).unwrap();
    let live = rows.iter().find(|r| r.step == 10).unwrap();
    let model = load_checkpoint(&dir.path().join("checkpoints/step_00000010.ckpt")).unwrap();
    let again = evaluate(&model, &items, 10, live.tokens_seen, &live.tag).unwrap();
    assert_eq!(MetricsCsv::row(&again), MetricsCsv::row(live));
}

#[test]
fn identical_inputs_give_identical_run_directories() {
    let ds = micro_dataset();
    let cfg = micro_config(Strategy::IntensiveFocused, "checkpoint_every = 10\nreplay_interval = 4\n");
    let items = eval_items(&ds, &cfg).unwrap();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    run_pretraining(&cfg, &ds, &items, 1, d1.path()).unwrap();
    run_pretraining(&cfg, &ds, &items, 1, d2.path()).unwrap();
    let list = |d: &Path| {
        let mut v: Vec<_> = walk(d).into_iter().map(|p| p.strip_prefix(d).unwrap().to_path_buf()).collect();
        v.sort();
        v
    };
    let files = list(d1.path());
    assert_eq!(files, list(d2.path()));
    assert!(files.len() >= 6);
    for f in files {
        assert_eq!(fs::read(d1.path().join(&f)).unwrap(), fs::read(d2.path().join(&f)).unwrap(), "{}", f.display());
    }
}

fn walk(d: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(d).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn upper_bound_needs_its_checkpoint() {
    let ds = micro_dataset();
    let cfg = micro_config(Strategy::UpperBound, "");
    let items = eval_items(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = run_upper_bound(&dir.path().join("nope.ckpt"), &items, &cfg, &dir.path().join("ub")).unwrap_err();
    assert!(err.to_string().contains("missing checkpoint"), "{err}");
    assert!(!dir.path().join("ub").exists());
}

#[test]
fn upper_bound_respects_the_epoch_cap() {
    let ds = micro_dataset();
    let cfg = micro_config(Strategy::UpperBound, "upper_bound_epochs = 2\nupper_bound_lr = 0.01\n");
    let items = eval_items(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = run_pretraining(&cfg, &ds, &items, 1, dir.path()).unwrap();
    let n = r.upper_bound_epochs.unwrap();
    assert!((1..=2).contains(&n));
    assert_eq!(r.reports.last().unwrap().tag, "upper_bound");
    assert_eq!(events(dir.path(), "upper_bound_epoch").len() as u32, n);
}

#[test]
fn already_perfect_model_stops_after_one_upper_bound_epoch() {
    let ds = micro_dataset();
    let cfg = micro_config(Strategy::UpperBound, "d_model = 32\nd_ffn = 64\nupper_bound_lr = 0.001\neval_max_pairs = 2\n");
    let items = eval_items(&ds, &cfg).unwrap();
    let mut model = forgetrace::model::init_model(&forgetrace::model::ModelConfig { total_steps: 10, ..cfg.model }).unwrap();
    let windows = item_windows(&items);
    let mut epochs = 0;
    let ex = exclusive_only(&items);
    while m_ex(&model, &ex).unwrap() < 1.0 {
        train_on_windows(&mut model, &windows, 20, 0.01).unwrap();
        epochs += 20;
        assert!(epochs < 2000, "could not memorize the fixture");
    }
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("perfect.ckpt");
    save_checkpoint(&model, &ckpt).unwrap();
    let (row, n) = run_upper_bound(&ckpt, &items, &cfg, &dir.path().join("ub")).unwrap();
    assert_eq!(n, 1);
    assert_eq!(row.m_ex, 1.0);
}

#[test]
fn periodic_curve_has_floor_sessions_and_zero_intensity_matches_baseline() {
    let ds = micro_dataset();
    let cfg = micro_config(
        Strategy::Vanilla,
        "intensive_epochs = 0,2\nperiodic = true\nperiodic_interval = 7\nperiodic_epochs = 1\ncurve_eval_every = 5\n",
    );
    let items = eval_items(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_forgetting_curve(&cfg, &ds, &items, 6, dir.path()).unwrap();
    assert_eq!(out.curves.len(), 3);
    let periodic = out.curves.iter().find(|c| c.periodic).unwrap();
    assert_eq!(periodic.intensive_epochs, 2);
    // resumed phase defaults to one more pass over the corpus
    let resumed = periodic.reports.last().unwrap().step - periodic.reports[0].step;
    assert_eq!(periodic.sessions, resumed / 7);
    assert_eq!(events(dir.path(), "periodic_replay").len() as u64, resumed / 7);
    for c in &out.curves {
        assert!(c.file.exists());
        assert_eq!(read_metrics_csv(&c.file).unwrap().len(), c.reports.len());
    }

    // the same seed trained without any intervention for the same number of passes
    let van = forgetrace::scheduler::RunConfig { epochs: cfg.epochs + 1, ..cfg.clone() };
    let vdir = tempfile::tempdir().unwrap();
    let base = run_pretraining(&van, &ds, &items, 6, vdir.path()).unwrap();
    let bucket = &out.buckets[cfg.curve.bucket];
    let chosen: Vec<_> = items.iter().filter(|i| bucket.entity_ids.contains(&i.entity_id)).cloned().collect();
    let control = out.curves.iter().find(|c| c.intensive_epochs == 0).unwrap();
    let last = control.reports.last().unwrap();
    let expect = evaluate(&base.model, &chosen, last.step, last.tokens_seen, &last.tag).unwrap();
    assert_eq!(MetricsCsv::row(last), MetricsCsv::row(&expect));
}
