//! Cross-run exports: the strategy table and collected curve CSVs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use super::config::RunConfig;
use super::run::{CONFIG_FILE, METRICS_FILE};
use crate::metrics::{read_metrics_csv, MetricReport};

pub const TABLE1_FILE: &str = "table1.csv";
pub const TABLE1_HEADER: &str = "strategy,seed,ppl_ent,mf_ent,m_ex,m_in";

/// `(label, dir)` for a run directory: itself when it holds `metrics.csv`,
/// else its `seed_N` children in seed order.
pub fn seed_dirs(run: &Path) -> Result<Vec<(String, PathBuf)>> {
    if run.join(METRICS_FILE).exists() {
        let seeds = RunConfig::from_file(&run.join(CONFIG_FILE)).map(|c| c.seeds).unwrap_or_default();
        let label = seeds.first().map_or_else(|| "-".to_string(), u64::to_string);
        return Ok(vec![(label, run.to_path_buf())]);
    }
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    for e in fs::read_dir(run).with_context(|| format!("reading run directory {}", run.display()))? {
        let p = e?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(n) = name.strip_prefix("seed_").and_then(|s| s.parse().ok()) {
            if p.join(METRICS_FILE).exists() {
                found.push((n, p));
            }
        }
    }
    if found.is_empty() {
        bail!("{} holds neither metrics.csv nor seed_N runs", run.display());
    }
    found.sort();
    Ok(found.into_iter().map(|(n, p)| (n.to_string(), p)).collect())
}

/// Last evaluated row of a run; aborted runs are an error.
pub fn final_row(dir: &Path) -> Result<MetricReport> {
    let rows = read_metrics_csv(&dir.join(METRICS_FILE))?;
    if rows.iter().any(|r| r.tag == "aborted") {
        bail!("run {} was aborted", dir.display());
    }
    rows.into_iter().rev().find(|r| r.n_items > 0).with_context(|| format!("run {} has no evaluated rows", dir.display()))
}

fn strategy_of(dir: &Path) -> Result<String> {
    let cfg = RunConfig::from_file(&dir.join(CONFIG_FILE)).with_context(|| format!("reading config of {}", dir.display()))?;
    Ok(cfg.strategy.to_string())
}

/// One row per seed of every run plus a `mean` row per run.
pub fn table1(runs: &[PathBuf]) -> Result<String> {
    let mut out = String::from(TABLE1_HEADER);
    out.push('\n');
    for run in runs {
        let seeds = seed_dirs(run)?;
        let strategy = strategy_of(&seeds[0].1)?;
        let mut sum = [0.0; 4];
        for (label, dir) in &seeds {
            let r = final_row(dir)?;
            let v = [r.ppl, r.mf, r.m_ex, r.m_in];
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            writeln!(out, "{strategy},{label},{:.9e},{:.9e},{:.9e},{:.9e}", v[0], v[1], v[2], v[3]).unwrap();
        }
        let n = seeds.len() as f64;
        writeln!(out, "{strategy},mean,{:.9e},{:.9e},{:.9e},{:.9e}", sum[0] / n, sum[1] / n, sum[2] / n, sum[3] / n).unwrap();
    }
    Ok(out)
}

/// Copies every `curve_*.csv` of the runs into `out/curves/`, prefixed by
/// run name and seed. Returns the written paths.
pub fn export_curves(runs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let dest = out.join("curves");
    fs::create_dir_all(&dest)?;
    let mut written = Vec::new();
    for run in runs {
        let name = run.file_name().and_then(|n| n.to_str()).unwrap_or("run").to_string();
        for (label, dir) in seed_dirs(run)? {
            let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("curve_") && n.ends_with(".csv")))
                .collect();
            files.sort();
            for f in files {
                let target = dest.join(format!("{name}_seed{label}_{}", f.file_name().unwrap().to_string_lossy()));
                fs::copy(&f, &target)?;
                written.push(target);
            }
        }
    }
    if written.is_empty() {
        bail!("no curve_*.csv files found in the given runs");
    }
    Ok(written)
}
