use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use super::{decode_items, exclusive_score, for_each_logits, inclusive_score, EvalItem, MetricsError, Mode, Result};
use crate::corpus::{EntityType, TokenId};
use crate::model::{argmax, log_softmax_at, LanguageModel};

/// The four metrics over one subset of eval items.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TypeMetrics {
    pub ppl: f64,
    pub mf: f64,
    pub m_in: f64,
    pub m_ex: f64,
    pub n_items: usize,
}

/// One evaluation row. PPL and M(f) are measured on the windows of the
/// entity-bearing items, so they are the entity-restricted variants.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub step: u64,
    pub tokens_seen: u64,
    pub ppl: f64,
    pub mf: f64,
    pub m_in: f64,
    pub m_ex: f64,
    pub n_items: usize,
    pub per_type: BTreeMap<EntityType, TypeMetrics>,
    /// Free-form row label such as `boundary`, `final` or `aborted`.
    pub tag: String,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    lp: f64,
    lp_n: usize,
    mf_hits: usize,
    mf_n: usize,
    in_hits: f64,
    in_n: usize,
    ex_hits: f64,
    ex_n: usize,
}

impl Acc {
    fn finish(&self, n_items: usize) -> TypeMetrics {
        let div = |a: f64, b: usize| if b == 0 { f64::NAN } else { a / b as f64 };
        TypeMetrics {
            ppl: (-div(self.lp, self.lp_n)).exp(),
            mf: div(self.mf_hits as f64, self.mf_n),
            m_in: div(self.in_hits, self.in_n),
            m_ex: div(self.ex_hits, self.ex_n),
            n_items,
        }
    }
}

/// Computes every metric over `items`, overall and per entity type.
///
/// Sums run in item order, so rows are bit-reproducible.
pub fn evaluate<M: LanguageModel + ?Sized>(
    model: &M,
    items: &[EvalItem],
    step: u64,
    tokens_seen: u64,
    tag: &str,
) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(MetricsError::Empty("item set"));
    }
    let decoded = decode_items(model, items)?;
    // PPL and M(f) windows come from the exclusive items, or from the
    // inclusive ones when a set has no exclusive twin at all.
    let window_mode = if items.iter().any(|i| i.mode == Mode::Exclusive) { Mode::Exclusive } else { Mode::Inclusive };
    let widx: Vec<usize> = (0..items.len()).filter(|&i| items[i].mode == window_mode).collect();
    let windows: Vec<Vec<TokenId>> = widx.iter().map(|&i| items[i].window()).collect();
    let mut win_stats = vec![(0.0, 0usize, 0usize, 0usize); windows.len()];
    for_each_logits(model, &windows, |k, l| {
        let w = &windows[k];
        let plen = items[widx[k]].prefix.len();
        let st = &mut win_stats[k];
        for (t, &tok) in w.iter().enumerate().skip(1) {
            st.0 += log_softmax_at(l.row(t - 1), tok as usize);
            st.1 += 1;
            if t >= plen {
                st.2 += usize::from(argmax(l.row(t - 1)) == tok);
                st.3 += 1;
            }
        }
    })?;

    let mut overall = Acc::default();
    let mut by_type: BTreeMap<EntityType, Acc> = BTreeMap::new();
    let mut pairs: BTreeMap<EntityType, BTreeSet<u64>> = BTreeMap::new();
    let mut wk = 0;
    for (i, (it, d)) in items.iter().zip(&decoded).enumerate() {
        pairs.entry(it.entity_type).or_default().insert(it.pair_id);
        let t = by_type.entry(it.entity_type).or_default();
        for acc in [&mut overall, t] {
            match it.mode {
                Mode::Inclusive => {
                    acc.in_hits += inclusive_score(d, &it.target) * it.target.len() as f64;
                    acc.in_n += it.target.len();
                }
                Mode::Exclusive => {
                    acc.ex_hits += exclusive_score(d, &it.entity_tokens);
                    acc.ex_n += 1;
                }
            }
            if wk < widx.len() && widx[wk] == i {
                let s = win_stats[wk];
                acc.lp += s.0;
                acc.lp_n += s.1;
                acc.mf_hits += s.2;
                acc.mf_n += s.3;
            }
        }
        if wk < widx.len() && widx[wk] == i {
            wk += 1;
        }
    }
    let per_type: BTreeMap<EntityType, TypeMetrics> =
        by_type.iter().map(|(&ty, acc)| (ty, acc.finish(pairs[&ty].len()))).collect();
    let n_items = per_type.values().map(|t| t.n_items).sum();
    let all = overall.finish(n_items);
    Ok(MetricReport {
        step,
        tokens_seen,
        ppl: all.ppl,
        mf: all.mf,
        m_in: all.m_in,
        m_ex: all.m_ex,
        n_items,
        per_type,
        tag: tag.to_string(),
    })
}

fn real(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.9e}")
    } else {
        String::new()
    }
}

fn parse_real(s: &str) -> std::result::Result<f64, String> {
    if s.is_empty() {
        Ok(f64::NAN)
    } else {
        s.parse().map_err(|e| format!("bad real {s:?}: {e}"))
    }
}

/// The `metrics.csv` schema.
pub struct MetricsCsv;

impl MetricsCsv {
    pub fn header() -> String {
        let mut h = String::from("step,tokens_seen,ppl,mf,m_in,m_ex,n_items");
        for ty in EntityType::ALL {
            let t = ty.as_str();
            write!(h, ",ppl_{t},mf_{t},m_in_{t},m_ex_{t},n_items_{t}").unwrap();
        }
        h.push_str(",tag");
        h
    }

    pub fn row(r: &MetricReport) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{}",
            r.step,
            r.tokens_seen,
            real(r.ppl),
            real(r.mf),
            real(r.m_in),
            real(r.m_ex),
            r.n_items
        );
        for ty in EntityType::ALL {
            match r.per_type.get(&ty) {
                Some(t) => write!(s, ",{},{},{},{},{}", real(t.ppl), real(t.mf), real(t.m_in), real(t.m_ex), t.n_items),
                None => write!(s, ",,,,,0"),
            }
            .unwrap();
        }
        write!(s, ",{}", r.tag).unwrap();
        s
    }

    /// A row carrying only step, tokens and a tag, e.g. an abort marker.
    pub fn marker(step: u64, tokens_seen: u64, tag: &str) -> String {
        let blank = MetricReport {
            step,
            tokens_seen,
            ppl: f64::NAN,
            mf: f64::NAN,
            m_in: f64::NAN,
            m_ex: f64::NAN,
            n_items: 0,
            per_type: BTreeMap::new(),
            tag: tag.to_string(),
        };
        Self::row(&blank)
    }

    pub fn parse_row(line: &str) -> std::result::Result<MetricReport, String> {
        let f: Vec<&str> = line.split(',').collect();
        let width = 7 + 5 * EntityType::ALL.len() + 1;
        if f.len() != width {
            return Err(format!("expected {width} fields, got {}", f.len()));
        }
        let int = |s: &str| s.parse::<u64>().map_err(|e| format!("bad integer {s:?}: {e}"));
        let mut per_type = BTreeMap::new();
        for (k, ty) in EntityType::ALL.into_iter().enumerate() {
            let b = 7 + 5 * k;
            let n = int(f[b + 4])? as usize;
            if n > 0 {
                per_type.insert(
                    ty,
                    TypeMetrics {
                        ppl: parse_real(f[b])?,
                        mf: parse_real(f[b + 1])?,
                        m_in: parse_real(f[b + 2])?,
                        m_ex: parse_real(f[b + 3])?,
                        n_items: n,
                    },
                );
            }
        }
        Ok(MetricReport {
            step: int(f[0])?,
            tokens_seen: int(f[1])?,
            ppl: parse_real(f[2])?,
            mf: parse_real(f[3])?,
            m_in: parse_real(f[4])?,
            m_ex: parse_real(f[5])?,
            n_items: int(f[6])? as usize,
            per_type,
            tag: f[width - 1].to_string(),
        })
    }
}

/// Reads a `metrics.csv`, checking the header.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let perr = |line: usize, msg: String| MetricsError::Parse { path: path.display().to_string(), line, msg };
    if lines.next() != Some(MetricsCsv::header().as_str()) {
        return Err(perr(1, "unexpected header".into()));
    }
    lines.enumerate().map(|(i, l)| MetricsCsv::parse_row(l).map_err(|m| perr(i + 2, m))).collect()
}
