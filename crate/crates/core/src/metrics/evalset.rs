use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use super::{contains_subsequence, decode_items, exclusive_score, EvalItem, MetricsError, Mode, Result, WINDOW};
use crate::corpus::{Document, EntityDictionary};
use crate::model::LanguageModel;

fn occurrence_counts(docs: &[Document], dict: &EntityDictionary) -> BTreeMap<u64, usize> {
    let mut counts: BTreeMap<u64, usize> = dict.iter().map(|(id, _)| (id, 0)).collect();
    for d in docs {
        for s in &d.entities {
            if let Some(c) = counts.get_mut(&s.entity_id) {
                *c += 1;
            }
        }
    }
    counts
}

fn median(values: impl Iterator<Item = usize>) -> f64 {
    let mut v: Vec<usize> = values.collect();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

/// Entities in the top half by A-frequency and the bottom half by
/// B-frequency. Both halves split at the median; ties go to the top half.
pub fn select_entities(a: &[Document], b: &[Document], dict: &EntityDictionary) -> BTreeSet<u64> {
    if dict.is_empty() {
        return BTreeSet::new();
    }
    let ca = occurrence_counts(a, dict);
    let cb = occurrence_counts(b, dict);
    let ma = median(ca.values().copied());
    let mb = median(cb.values().copied());
    ca.iter()
        .filter(|&(id, &n)| n > 0 && n as f64 >= ma && (cb[id] as f64) < mb)
        .map(|(&id, _)| id)
        .collect()
}

/// Inclusive/exclusive item pairs for every qualifying occurrence in A,
/// ordered by (doc_id, span start).
pub fn build_entity_evalset(a: &[Document], b: &[Document], dict: &EntityDictionary) -> Result<Vec<EvalItem>> {
    let chosen = select_entities(a, b, dict);
    if chosen.is_empty() {
        return Err(MetricsError::EmptyIntersection);
    }
    let mut docs: Vec<&Document> = a.iter().collect();
    docs.sort_by_key(|d| d.doc_id);
    let mut items = Vec::new();
    let mut pair = 0u64;
    for d in docs {
        let mut spans: Vec<_> = d.entities.iter().filter(|s| chosen.contains(&s.entity_id)).collect();
        spans.sort_by_key(|s| s.token_start);
        for s in spans {
            let (start, end) = (s.token_start, s.token_end);
            if start < WINDOW || end + WINDOW > d.tokens.len() {
                continue;
            }
            let entity = d.tokens[start..end].to_vec();
            let ex_prefix = &d.tokens[start - WINDOW..start];
            if contains_subsequence(ex_prefix, &entity) || entity.len() > WINDOW {
                continue;
            }
            let base = |mode, prefix: &[_], target: &[_], item_id| EvalItem {
                item_id,
                pair_id: pair,
                doc_id: d.doc_id,
                entity_id: s.entity_id,
                entity_type: s.entity_type,
                mode,
                prefix: prefix.to_vec(),
                target: target.to_vec(),
                entity_tokens: entity.clone(),
            };
            items.push(base(Mode::Inclusive, &d.tokens[end - WINDOW..end], &d.tokens[end..end + WINDOW], 2 * pair));
            items.push(base(Mode::Exclusive, ex_prefix, &d.tokens[start..start + WINDOW], 2 * pair + 1));
            pair += 1;
        }
    }
    if items.is_empty() {
        return Err(MetricsError::Empty("eval set: no occurrence has 32 tokens of context on both sides"));
    }
    Ok(items)
}

fn exclusive_hits<M: LanguageModel + ?Sized>(model: &M, items: &[EvalItem]) -> Result<Vec<(usize, f64)>> {
    let idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].mode == Mode::Exclusive).collect();
    let ex: Vec<EvalItem> = idx.iter().map(|&i| items[i].clone()).collect();
    let decoded = decode_items(model, &ex)?;
    Ok(idx.into_iter().zip(ex.iter().zip(&decoded)).map(|(i, (it, d))| (i, exclusive_score(d, &it.entity_tokens))).collect())
}

/// Keeps the pairs whose exclusive item scores 1.
pub fn filter_memorized<M: LanguageModel + ?Sized>(model: &M, items: &[EvalItem]) -> Result<Vec<EvalItem>> {
    let keep: BTreeSet<u64> =
        exclusive_hits(model, items)?.into_iter().filter(|&(_, s)| s == 1.0).map(|(i, _)| items[i].pair_id).collect();
    Ok(items.iter().filter(|i| keep.contains(&i.pair_id)).cloned().collect())
}

/// Mean exclusive score per entity.
pub fn per_entity_accuracy<M: LanguageModel + ?Sized>(model: &M, items: &[EvalItem]) -> Result<BTreeMap<u64, f64>> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (i, s) in exclusive_hits(model, items)? {
        let e = acc.entry(items[i].entity_id).or_insert((0.0, 0));
        e.0 += s;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyBucket {
    pub bucket_id: usize,
    pub entity_ids: BTreeSet<u64>,
    pub mean_accuracy: f64,
}

/// Sorts entities by accuracy (then id) and cuts them into `k` buckets whose
/// sizes differ by at most one, larger buckets first.
pub fn bucket_by_difficulty(acc: &BTreeMap<u64, f64>, k: usize) -> Result<Vec<DifficultyBucket>> {
    if k < 2 {
        return Err(MetricsError::Invalid(format!("k must be >= 2, got {k}")));
    }
    if k > acc.len() {
        return Err(MetricsError::Invalid(format!("k = {k} exceeds entity count {}", acc.len())));
    }
    let mut sorted: Vec<(u64, f64)> = acc.iter().map(|(&id, &a)| (id, a)).collect();
    sorted.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    let n = sorted.len();
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for bucket_id in 0..k {
        let len = n / k + usize::from(bucket_id < n % k);
        let part = &sorted[start..start + len];
        start += len;
        out.push(DifficultyBucket {
            bucket_id,
            entity_ids: part.iter().map(|p| p.0).collect(),
            mean_accuracy: part.iter().map(|p| p.1).sum::<f64>() / len as f64,
        });
    }
    Ok(out)
}

pub fn write_items(path: &Path, items: &[EvalItem]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_items(path: &Path) -> Result<Vec<EvalItem>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MetricsError::Parse {
            path: path.display().to_string(),
            line: n + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::corpus::{EntitySpan, EntityType, Source, TokenId};
    use crate::metrics::testing::Scripted;

    /// A document of `len` filler tokens with the given (entity, start) mentions.
    /// Entity `e` is the two tokens `[100 + 2e, 101 + 2e]`.
    fn doc(id: u64, source: Source, len: usize, mentions: &[(u64, usize)]) -> Document {
        let mut tokens: Vec<TokenId> = (0..len).map(|i| 3 + ((i as u32 * 7 + id as u32) % 50)).collect();
        let mut entities = Vec::new();
        for &(e, start) in mentions {
            tokens[start] = 100 + 2 * e as u32;
            tokens[start + 1] = 101 + 2 * e as u32;
            entities.push(EntitySpan { entity_id: e, token_start: start, token_end: start + 2, entity_type: EntityType::Per });
        }
        Document { doc_id: id, source, tokens, entities, char_text: String::new() }
    }

    fn dict(n: u64) -> EntityDictionary {
        let mut d = EntityDictionary::new();
        for e in 0..n {
            d.insert_tokens(e, &format!("e{e}"), vec![100 + 2 * e as u32, 101 + 2 * e as u32], EntityType::Per);
        }
        d
    }

    /// Brute-force rule on raw counts, independent of the library median.
    fn brute_select(ca: &[usize], cb: &[usize]) -> BTreeSet<u64> {
        let half = |c: &[usize]| {
            let mut s = c.to_vec();
            s.sort();
            let n = s.len();
            if n % 2 == 1 { s[n / 2] as f64 } else { (s[n / 2 - 1] + s[n / 2]) as f64 / 2.0 }
        };
        let (ma, mb) = (half(ca), half(cb));
        (0..ca.len()).filter(|&e| ca[e] > 0 && ca[e] as f64 >= ma && (cb[e] as f64) < mb).map(|e| e as u64).collect()
    }

    fn corpora(ca: &[usize], cb: &[usize]) -> (Vec<Document>, Vec<Document>) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut id = 0;
        for (e, (&na, &nb)) in ca.iter().zip(cb).enumerate() {
            for _ in 0..na {
                a.push(doc(id, Source::A, 80, &[(e as u64, 40)]));
                id += 1;
            }
            for _ in 0..nb {
                b.push(doc(id, Source::B, 80, &[(e as u64, 40)]));
                id += 1;
            }
        }
        (a, b)
    }

    #[test]
    fn six_entity_fixture_by_hand() {
        // A counts 10 4 4 1 0 2 → median (2+4)/2 = 3 → top A: {0, 1, 2}
        // B counts  0 5 1 0 6 3 → median (1+3)/2 = 2 → bottom B: {0, 2, 3}
        let (ca, cb) = ([10, 4, 4, 1, 0, 2], [0, 5, 1, 0, 6, 3]);
        let (a, b) = corpora(&ca, &cb);
        let chosen = select_entities(&a, &b, &dict(6));
        assert_eq!(chosen, BTreeSet::from([0, 2]));
        assert_eq!(chosen, brute_select(&ca, &cb));
        let items = build_entity_evalset(&a, &b, &dict(6)).unwrap();
        assert_eq!(items.len(), 2 * (10 + 4));
    }

    #[test]
    fn b_only_entity_excluded_and_extreme_selected() {
        let (a, b) = corpora(&[10, 0, 1, 1], &[0, 7, 3, 3]);
        let chosen = select_entities(&a, &b, &dict(4));
        assert!(chosen.contains(&0));
        assert!(!chosen.contains(&1));
    }

    #[test]
    fn empty_intersection_errors() {
        let (a, b) = corpora(&[3, 3], &[3, 3]);
        let e = build_entity_evalset(&a, &b, &dict(2)).unwrap_err();
        assert!(e.to_string().contains("empty intersection"));
    }

    #[test]
    fn items_have_the_documented_shape() {
        let a = vec![doc(0, Source::A, 90, &[(0, 40)]), doc(1, Source::A, 60, &[(0, 33)]), doc(2, Source::A, 90, &[(0, 10)])];
        let b = vec![doc(9, Source::B, 80, &[(1, 40)])];
        let items = build_entity_evalset(&a, &b, &dict(2)).unwrap();
        // only doc 0 has 32 tokens on both sides
        assert_eq!(items.len(), 2);
        let (inc, exc) = (&items[0], &items[1]);
        assert_eq!((inc.mode, exc.mode), (Mode::Inclusive, Mode::Exclusive));
        assert_eq!(inc.pair_id, exc.pair_id);
        assert!(inc.prefix.ends_with(&inc.entity_tokens));
        assert!(!contains_subsequence(&exc.prefix, &exc.entity_tokens));
        assert!(exc.target.starts_with(&exc.entity_tokens));
        for it in &items {
            assert_eq!((it.prefix.len(), it.target.len()), (WINDOW, WINDOW));
        }
        assert_eq!(exc.prefix, a[0].tokens[8..40]);
        assert_eq!(inc.target, a[0].tokens[42..74]);
    }

    #[test]
    fn filter_keeps_exactly_memorized_pairs() {
        let a: Vec<Document> = (0..5).map(|i| doc(i, Source::A, 80, &[(0, 40)])).collect();
        let b = vec![doc(9, Source::B, 80, &[(1, 40)])];
        let items = build_entity_evalset(&a, &b, &dict(2)).unwrap();
        let mut m = Scripted::new(200);
        for it in items.iter().filter(|i| i.mode == Mode::Exclusive && [0, 2, 4].contains(&i.doc_id)) {
            m.script(&it.prefix, &it.entity_tokens);
        }
        let kept = filter_memorized(&m, &items).unwrap();
        let docs: BTreeSet<u64> = kept.iter().map(|i| i.doc_id).collect();
        assert_eq!(docs, BTreeSet::from([0, 2, 4]));
        assert_eq!(kept.len(), 6);
        let never = Scripted::new(200);
        assert!(filter_memorized(&never, &items).unwrap().is_empty());
    }

    #[test]
    fn buckets() {
        let acc: BTreeMap<u64, f64> = [(1, 0.9), (2, 0.1), (3, 0.8), (4, 0.2)].into();
        let b = bucket_by_difficulty(&acc, 2).unwrap();
        assert_eq!(b[0].entity_ids, BTreeSet::from([2, 4]));
        assert_eq!(b[1].entity_ids, BTreeSet::from([1, 3]));
        let acc: BTreeMap<u64, f64> = (0..7).map(|i| (i, (7 - i) as f64 / 10.0)).collect();
        let b = bucket_by_difficulty(&acc, 3).unwrap();
        let sizes: Vec<usize> = b.iter().map(|x| x.entity_ids.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
        // sorted accuracies .1 .2 .3 | .4 .5 | .6 .7
        assert!((b[0].mean_accuracy - 0.2).abs() < 1e-12);
        assert!((b[1].mean_accuracy - 0.45).abs() < 1e-12);
        assert!((b[2].mean_accuracy - 0.65).abs() < 1e-12);
        assert!(bucket_by_difficulty(&acc, 8).is_err());
        assert!(bucket_by_difficulty(&acc, 1).is_err());
        let flat: BTreeMap<u64, f64> = (0..4).map(|i| (i, 0.5)).collect();
        let b = bucket_by_difficulty(&flat, 2).unwrap();
        assert_eq!(b[0].mean_accuracy, b[1].mean_accuracy);
    }

    #[test]
    fn jsonl_roundtrip() {
        let a: Vec<Document> = (0..3).map(|i| doc(i, Source::A, 80, &[(0, 40)])).collect();
        let b = vec![doc(9, Source::B, 80, &[(1, 40)])];
        let items = build_entity_evalset(&a, &b, &dict(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("items.jsonl");
        write_items(&p, &items).unwrap();
        assert_eq!(read_items(&p).unwrap(), items);
    }

    proptest! {
        #[test]
        fn selection_matches_brute_force_and_ignores_order(
            counts in proptest::collection::vec((0usize..6, 0usize..6), 1..8),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let ca: Vec<usize> = counts.iter().map(|c| c.0).collect();
            let cb: Vec<usize> = counts.iter().map(|c| c.1).collect();
            let (mut a, mut b) = corpora(&ca, &cb);
            let d = dict(ca.len() as u64);
            prop_assert_eq!(select_entities(&a, &b, &d), brute_select(&ca, &cb));
            let before = build_entity_evalset(&a, &b, &d).ok();
            let mut rng = crate::rng::substream(seed, "perm");
            a.shuffle(&mut rng);
            b.shuffle(&mut rng);
            prop_assert_eq!(build_entity_evalset(&a, &b, &d).ok(), before);
        }

        #[test]
        fn buckets_partition_and_sort(accs in proptest::collection::vec(0u32..5, 2..20), k in 2usize..5) {
            let acc: BTreeMap<u64, f64> = accs.iter().enumerate().map(|(i, &a)| (i as u64, a as f64 / 4.0)).collect();
            match bucket_by_difficulty(&acc, k) {
                Err(_) => prop_assert!(k > acc.len()),
                Ok(b) => {
                    let all: BTreeSet<u64> = b.iter().flat_map(|x| x.entity_ids.iter().copied()).collect();
                    prop_assert_eq!(all.len(), acc.len());
                    let sizes: Vec<usize> = b.iter().map(|x| x.entity_ids.len()).collect();
                    prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
                    prop_assert!(b.windows(2).all(|w| w[0].mean_accuracy <= w[1].mean_accuracy));
                }
            }
        }
    }
}
