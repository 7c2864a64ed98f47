//! KILT-style slot-filling scores: R-Precision, Recall@5, accuracy, token F1
//! and the provenance-gated KILT-AC / KILT-F1.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retriever::SlotQuery;

/// Lowercase, strip ASCII punctuation, drop the articles "a", "an", "the",
/// collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn f1_single(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let p_toks: Vec<&str> = p.split_whitespace().collect();
    let g_toks: Vec<&str> = g.split_whitespace().collect();
    if p_toks.is_empty() || g_toks.is_empty() {
        return if p_toks.is_empty() && g_toks.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &g_toks {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p_toks {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p_toks.len() as f64;
    let recall = common as f64 / g_toks.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best bag-of-tokens F1 against any gold answer.
pub fn token_f1(pred: &str, golds: &[String]) -> f64 {
    golds
        .iter()
        .map(|g| f1_single(pred, g))
        .fold(0.0, f64::max)
}

pub fn accuracy(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

/// Fraction of the top-R pages that are gold, with R the number of gold pages.
pub fn r_precision(provenance: &[String], gold_pages: &BTreeSet<String>) -> f64 {
    if gold_pages.is_empty() {
        return 0.0;
    }
    let r = gold_pages.len();
    let hits = provenance.iter().take(r).filter(|p| gold_pages.contains(*p)).count();
    hits as f64 / r as f64
}

pub fn recall_at_5(provenance: &[String], gold_pages: &BTreeSet<String>) -> f64 {
    if gold_pages.is_empty() {
        return 0.0;
    }
    let hits = provenance.iter().take(5).filter(|p| gold_pages.contains(*p)).count();
    hits as f64 / gold_pages.len() as f64
}

/// Credits `answer_score` only when provenance is fully correct.
pub fn kilt_gate(answer_score: f64, rprec: f64) -> f64 {
    if rprec == 1.0 {
        answer_score
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_id: String,
    pub answer: String,
    /// Ranked, deduplicated page ids.
    pub provenance: Vec<String>,
    /// Sequence log-probability; `-inf` when nothing was retrieved.
    pub score: f64,
}

impl Prediction {
    /// Builds a prediction, deduplicating `pages` while keeping first occurrences.
    pub fn new(
        query_id: impl Into<String>,
        answer: impl Into<String>,
        pages: impl IntoIterator<Item = String>,
        score: f64,
    ) -> Self {
        let mut seen = BTreeSet::new();
        let provenance = pages.into_iter().filter(|p| seen.insert(p.clone())).collect();
        Self {
            query_id: query_id.into(),
            answer: answer.into(),
            provenance,
            score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InstanceScores {
    pub r_precision: f64,
    pub recall_at_5: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub kilt_ac: f64,
    pub kilt_f1: f64,
}

pub fn score_instance(gold: &SlotQuery, pred: &Prediction) -> InstanceScores {
    let rp = r_precision(&pred.provenance, &gold.gold_pages);
    let acc = accuracy(&pred.answer, &gold.gold_answers);
    let f1 = token_f1(&pred.answer, &gold.gold_answers);
    InstanceScores {
        r_precision: rp,
        recall_at_5: recall_at_5(&pred.provenance, &gold.gold_pages),
        accuracy: acc,
        f1,
        kilt_ac: kilt_gate(acc, rp),
        kilt_f1: kilt_gate(f1, rp),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub r_precision: f64,
    pub recall_at_5: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub kilt_ac: f64,
    pub kilt_f1: f64,
    pub n: usize,
}

/// Averages per-instance scores; every gold id needs exactly one prediction.
/// Predictions for ids outside `golds` are ignored.
pub fn score_dataset(golds: &[SlotQuery], preds: &[Prediction]) -> Result<ScoreReport> {
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_id.insert(p.query_id.as_str(), p).is_some() {
            return Err(Error::DuplicateId(p.query_id.clone()));
        }
    }
    let missing: Vec<String> = golds
        .iter()
        .filter(|g| !by_id.contains_key(g.id.as_str()))
        .map(|g| g.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }

    let mut sum = InstanceScores::default();
    for g in golds {
        let s = score_instance(g, by_id[g.id.as_str()]);
        sum.r_precision += s.r_precision;
        sum.recall_at_5 += s.recall_at_5;
        sum.accuracy += s.accuracy;
        sum.f1 += s.f1;
        sum.kilt_ac += s.kilt_ac;
        sum.kilt_f1 += s.kilt_f1;
    }
    let n = golds.len();
    let d = n.max(1) as f64;
    Ok(ScoreReport {
        r_precision: sum.r_precision / d,
        recall_at_5: sum.recall_at_5 / d,
        accuracy: sum.accuracy / d,
        f1: sum.f1 / d,
        kilt_ac: sum.kilt_ac / d,
        kilt_f1: sum.kilt_f1 / d,
        n,
    })
}

impl ScoreReport {
    /// Aligned text table with one row labelled `method`.
    pub fn table(&self, method: &str) -> String {
        let headers = ["Method", "R-Prec", "Recall@5", "Accuracy", "F1", "KILT-AC", "KILT-F1"];
        let values = [
            self.r_precision,
            self.recall_at_5,
            self.accuracy,
            self.f1,
            self.kilt_ac,
            self.kilt_f1,
        ];
        let mut cells = vec![method.to_string()];
        cells.extend(values.iter().map(|v| format!("{:.2}%", v * 100.0)));
        let widths: Vec<usize> = headers
            .iter()
            .zip(&cells)
            .map(|(h, c)| h.len().max(c.len()))
            .collect();
        let row = |items: Vec<String>| {
            items
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let head = row(headers.iter().map(|s| s.to_string()).collect());
        let rule = "-".repeat(head.len());
        format!("{head}\n{rule}\n{}\n(n = {})\n", row(cells), self.n)
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table("system"))
    }
}
