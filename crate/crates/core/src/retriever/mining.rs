use rayon::prelude::*;

use super::{SlotQuery, TrainingTriple};
use crate::corpus::{Passage, PassageStore};
use crate::lexical::LexicalIndex;
use crate::metrics::normalize_answer;

pub const DEFAULT_POOL_SIZE: usize = 50;

/// True when the normalized text contains any normalized, non-empty answer as
/// a contiguous token run.
pub fn contains_answer(text: &str, answers: &[String]) -> bool {
    let norm = normalize_answer(text);
    let hay: Vec<&str> = norm.split_whitespace().collect();
    answers.iter().any(|a| {
        let a = normalize_answer(a);
        let needle: Vec<&str> = a.split_whitespace().collect();
        !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_slice())
    })
}

fn touches_gold(p: &Passage, query: &SlotQuery, golds: &[&Passage]) -> bool {
    if query.gold_passages.is_empty() {
        query.gold_pages.contains(&p.document_id)
    } else {
        golds.iter().any(|g| g.overlaps(p))
    }
}

/// Highest-ranked BM25 candidate for the query that neither overlaps gold
/// provenance nor contains a gold answer.
pub fn mine_hard_negative(
    query: &SlotQuery,
    index: &LexicalIndex,
    store: &PassageStore,
    pool_size: usize,
) -> Option<String> {
    let golds: Vec<&Passage> = query
        .gold_passages
        .iter()
        .filter_map(|id| store.get(id))
        .collect();
    index
        .search(&query.query_text(), pool_size)
        .into_iter()
        .filter_map(|(id, _)| store.get(&id))
        .find(|p| !touches_gold(p, query, &golds) && !contains_answer(&p.text, &query.gold_answers))
        .map(|p| p.passage_id.clone())
}

fn positive_for(query: &SlotQuery, store: &PassageStore) -> Option<String> {
    if let Some(id) = query.gold_passages.iter().find(|id| store.get(id).is_some()) {
        return Some(id.clone());
    }
    // page-level provenance only: prefer a passage of a gold page that holds an answer
    let pages: Vec<&Passage> = query
        .gold_pages
        .iter()
        .flat_map(|page| store.of_document(page))
        .collect();
    pages
        .iter()
        .find(|p| contains_answer(&p.text, &query.gold_answers))
        .or(pages.first())
        .map(|p| p.passage_id.clone())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MiningOutcome {
    pub triples: Vec<TrainingTriple>,
    /// Ids of queries left out for lack of a positive or a surviving negative.
    pub dropped: Vec<String>,
}

/// One triple per query, in query order.
pub fn build_triples(
    queries: &[SlotQuery],
    index: &LexicalIndex,
    store: &PassageStore,
    pool_size: usize,
) -> MiningOutcome {
    let mined: Vec<Option<TrainingTriple>> = queries
        .par_iter()
        .map(|q| {
            let positive = positive_for(q, store)?;
            let negative = mine_hard_negative(q, index, store, pool_size)?;
            Some(TrainingTriple {
                query_text: q.query_text(),
                positive_passage_id: positive,
                hard_negative_passage_id: negative,
            })
        })
        .collect();
    let mut out = MiningOutcome::default();
    for (q, t) in queries.iter().zip(mined) {
        match t {
            Some(t) => out.triples.push(t),
            None => out.dropped.push(q.id.clone()),
        }
    }
    out
}
