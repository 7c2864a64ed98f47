mod common;

use std::collections::HashMap;

use kgi::corpus::{segment_document, token_count, tokenize, Document, PassageStore};
use kgi::lexical::{Bm25Params, LexicalIndex};
use kgi::metrics::normalize_answer;
use kgi::retriever::mine_hard_negative;
use proptest::prelude::*;

fn paragraph() -> impl Strategy<Value = String> {
    // words joined by assorted separators; a few paragraphs are punctuation only
    prop::collection::vec(("[a-e]{1,3}", prop::sample::select(vec![" ", ", ", "-", " (", ". "])), 0..14)
        .prop_map(|ws| {
            let s: String = ws.into_iter().map(|(w, sep)| format!("{w}{sep}")).collect();
            if s.trim().is_empty() {
                "--".to_string()
            } else {
                s
            }
        })
}

fn document() -> impl Strategy<Value = Document> {
    prop::collection::vec(paragraph(), 1..9).prop_map(|paragraphs| Document {
        document_id: "D".into(),
        title: "Some Title Words".into(),
        paragraphs,
    })
}

/// BM25 computed per passage straight from the definition.
fn bm25_oracle(texts: &[Vec<String>], query: &[String], k1: f64, b: f64) -> Vec<f64> {
    let n = texts.len() as f64;
    let avg = texts.iter().map(Vec::len).sum::<usize>() as f64 / n;
    texts
        .iter()
        .map(|doc| {
            query
                .iter()
                .map(|t| {
                    let df = texts.iter().filter(|d| d.contains(t)).count() as f64;
                    let tf = doc.iter().filter(|w| *w == t).count() as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc.len() as f64 / avg))
                })
                .sum()
        })
        .collect()
}

fn corpus() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::collection::vec("[a-f]", 1..10).prop_map(|w| w.join(" ")), 1..40)
}

fn store_of(texts: &[String]) -> PassageStore {
    let ps = texts
        .iter()
        .enumerate()
        .map(|(i, t)| common::passage(&format!("p{i:02}"), &format!("D{:02}", i / 2), i % 2, t))
        .collect();
    PassageStore::new(ps).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn segmentation_covers_budgets_and_packs_greedily(doc in document(), max in 1usize..20) {
        let ps = segment_document(&doc, max).unwrap();
        let mut next = 0;
        for (i, p) in ps.iter().enumerate() {
            let (lo, hi) = p.paragraph_range;
            prop_assert_eq!(lo, next);
            prop_assert!(hi >= lo && hi < doc.paragraphs.len());
            next = hi + 1;
            prop_assert!(token_count(&p.text) <= max);

            let overflow = token_count(&doc.paragraphs[lo]) > max;
            prop_assert_eq!(p.truncated, lo == hi && overflow);
            if p.truncated {
                prop_assert!(doc.paragraphs[lo].starts_with(&p.text));
                prop_assert_eq!(tokenize(&p.text), tokenize(&doc.paragraphs[lo])[..max].to_vec());
            } else {
                prop_assert_eq!(&p.text, &doc.paragraphs[lo..=hi].join("\n"));
                // the following paragraph would not have fitted
                if let Some(q) = ps.get(i + 1) {
                    let first = token_count(&doc.paragraphs[q.paragraph_range.0]);
                    if first <= max {
                        prop_assert!(token_count(&p.text) + first > max);
                    }
                }
            }
        }
        prop_assert_eq!(next, doc.paragraphs.len());
        prop_assert_eq!(segment_document(&doc, max).unwrap(), ps);
    }

    #[test]
    fn bm25_matches_brute_force(texts in corpus(), query in prop::collection::vec("[a-h]", 1..5), k1 in 0.0f64..2.0, b in 0.0f64..=1.0) {
        let store = store_of(&texts);
        let index = LexicalIndex::build(store.as_slice(), Bm25Params { k1, b }).unwrap();
        let toks: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t)).collect();
        let expected = bm25_oracle(&toks, &query, k1, b);
        let hits = index.search(&query.join(" "), texts.len());
        let returned: HashMap<String, f64> = hits.iter().cloned().collect();
        for (i, e) in expected.iter().enumerate() {
            let id = format!("p{i:02}");
            match returned.get(&id) {
                Some(s) => prop_assert!((s - e).abs() <= 1e-9 * e.max(1.0), "{id}: {s} vs {e}"),
                None => prop_assert!(*e == 0.0, "{id} missing with score {e}"),
            }
        }
        for w in hits.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
        prop_assert!(hits.iter().all(|h| h.1 > 0.0));
    }

    #[test]
    fn bm25_results_are_prefixes(texts in corpus(), query in "[a-h]( [a-h]){0,3}", k in 1usize..20) {
        let store = store_of(&texts);
        let index = LexicalIndex::build(store.as_slice(), Bm25Params::default()).unwrap();
        let a = index.search(&query, k);
        let b = index.search(&query, k + 1);
        prop_assert!(a.len() <= k);
        prop_assert_eq!(&b[..a.len()], &a[..]);
    }

    #[test]
    fn mining_never_returns_gold_or_answer_passages(
        texts in corpus(),
        answer in "[b-f]( [a-f])?",
        gold in 0usize..20,
        pool in 1usize..30,
    ) {
        let store = store_of(&texts);
        let index = LexicalIndex::build(store.as_slice(), Bm25Params::default()).unwrap();
        let gold_doc = format!("D{:02}", gold % texts.len() / 2);
        let q = common::query("q", "a b", "c d", &[&answer], &[&gold_doc]);
        let mined = mine_hard_negative(&q, &index, &store, pool);

        let norm = normalize_answer(&answer);
        let holds_answer = |text: &str| {
            let hay = normalize_answer(text);
            let hay: Vec<&str> = hay.split_whitespace().collect();
            let needle: Vec<&str> = norm.split_whitespace().collect();
            hay.windows(needle.len()).any(|w| w == needle.as_slice())
        };
        // oracle: first BM25 candidate surviving both exclusions
        let expected = index
            .search(&q.query_text(), pool)
            .into_iter()
            .map(|(id, _)| store.get(&id).unwrap())
            .find(|p| p.document_id != gold_doc && !holds_answer(&p.text))
            .map(|p| p.passage_id.clone());
        prop_assert_eq!(&mined, &expected);
        if let Some(id) = mined {
            let p = store.get(&id).unwrap();
            prop_assert!(p.document_id != gold_doc);
            prop_assert!(!holds_answer(&p.text));
        }
    }
}
