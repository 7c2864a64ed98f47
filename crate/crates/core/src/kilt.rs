//! KILT-shaped gold and prediction JSONL.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::PassageStore;
use crate::error::{Error, Result};
use crate::metrics::Prediction;
use crate::retriever::{parse_query, SlotQuery};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub wikipedia_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_paragraph_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_paragraph_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldOutput {
    pub answer: String,
    #[serde(default)]
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub id: String,
    pub input: String,
    pub output: Vec<GoldOutput>,
}

impl GoldRecord {
    /// Resolves paragraph-level provenance to passage ids when a store is given.
    pub fn to_slot_query(&self, store: Option<&PassageStore>) -> Result<SlotQuery> {
        let malformed = |reason: &str| Error::invalid(format!("gold record `{}`: {reason}", self.id));
        let (head_entity, relation) = parse_query(&self.input);
        let gold_answers: Vec<String> = self.output.iter().map(|o| o.answer.clone()).collect();
        if gold_answers.is_empty() {
            return Err(malformed("no answers"));
        }
        let mut gold_pages = BTreeSet::new();
        let mut gold_passages = BTreeSet::new();
        for p in self.output.iter().flat_map(|o| &o.provenance) {
            gold_pages.insert(p.wikipedia_id.clone());
            let (Some(store), Some(start)) = (store, p.start_paragraph_id) else {
                continue;
            };
            let end = p.end_paragraph_id.unwrap_or(start);
            gold_passages.extend(
                store
                    .of_document(&p.wikipedia_id)
                    .filter(|ps| ps.paragraph_range.0 <= end && start <= ps.paragraph_range.1)
                    .map(|ps| ps.passage_id.clone()),
            );
        }
        if gold_pages.is_empty() {
            return Err(malformed("no provenance pages"));
        }
        Ok(SlotQuery {
            id: self.id.clone(),
            head_entity,
            relation,
            gold_answers,
            gold_pages,
            gold_passages,
        })
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(reader: R, source: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::io(format!("reading {source}")))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: &[T], what: &str) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(Error::io(format!("writing {what}")))?;
    }
    Ok(())
}

pub fn read_gold<R: BufRead>(reader: R, source: &str) -> Result<Vec<GoldRecord>> {
    read_jsonl(reader, source)
}

pub fn write_gold<W: Write>(w: W, records: &[GoldRecord]) -> Result<()> {
    write_jsonl(w, records, "gold records")
}

/// Gold records as slot queries, rejecting duplicate ids.
pub fn load_queries<R: BufRead>(
    reader: R,
    source: &str,
    store: Option<&PassageStore>,
) -> Result<Vec<SlotQuery>> {
    let mut seen = BTreeSet::new();
    read_gold(reader, source)?
        .iter()
        .map(|r| {
            if !seen.insert(r.id.clone()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            r.to_slot_query(store)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct PageRef {
    wikipedia_id: String,
}

#[derive(Serialize, Deserialize)]
struct PredOutput {
    answer: String,
    provenance: Vec<PageRef>,
    /// `null` stands for the −∞ score of an empty retrieval.
    score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct PredRecord {
    id: String,
    output: Vec<PredOutput>,
}

pub fn write_predictions<W: Write>(w: W, preds: &[Prediction]) -> Result<()> {
    let records: Vec<PredRecord> = preds
        .iter()
        .map(|p| PredRecord {
            id: p.query_id.clone(),
            output: vec![PredOutput {
                answer: p.answer.clone(),
                provenance: p
                    .provenance
                    .iter()
                    .map(|id| PageRef {
                        wikipedia_id: id.clone(),
                    })
                    .collect(),
                score: p.score.is_finite().then_some(p.score),
            }],
        })
        .collect();
    write_jsonl(w, &records, "predictions")
}

pub fn read_predictions<R: BufRead>(reader: R, source: &str) -> Result<Vec<Prediction>> {
    let records: Vec<PredRecord> = read_jsonl(reader, source)?;
    records
        .into_iter()
        .map(|r| {
            let Some(out) = r.output.into_iter().next() else {
                return Err(Error::invalid(format!("prediction `{}` has no output", r.id)));
            };
            Ok(Prediction::new(
                r.id,
                out.answer,
                out.provenance.into_iter().map(|p| p.wikipedia_id),
                out.score.unwrap_or(f64::NEG_INFINITY),
            ))
        })
        .collect()
}
