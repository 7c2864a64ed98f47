//! Hard-negative mining, the dual encoder, and in-batch-negative training.

mod encoder;
mod loss;
mod mining;
mod train;

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use encoder::{
    dot, passage_input, EncoderParams, Features, Side, SparseColumns, DEFAULT_BUCKETS,
    DEFAULT_DIM, INIT_RANGE,
};
pub(crate) use encoder::CONTAINER_MAGIC;
pub(crate) use train::epoch_batches;
pub use loss::{batch_loss, batch_loss_features, in_batch_probabilities, BatchLoss, EncoderGrads};
pub use mining::{build_triples, contains_answer, mine_hard_negative, MiningOutcome, DEFAULT_POOL_SIZE};
pub use train::{lr_at, train_dpr, LossRecord, Schedule, TrainConfig, TrainOutcome};

pub const SEP: &str = " [SEP] ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotQuery {
    pub id: String,
    pub head_entity: String,
    pub relation: String,
    pub gold_answers: Vec<String>,
    pub gold_pages: BTreeSet<String>,
    /// Empty when only page-level provenance is known.
    pub gold_passages: BTreeSet<String>,
}

impl SlotQuery {
    pub fn query_text(&self) -> String {
        render_query(&self.head_entity, &self.relation)
    }
}

pub fn render_query(head: &str, relation: &str) -> String {
    format!("{head}{SEP}{relation}")
}

/// Splits "head [SEP] relation"; input without a separator is all head.
pub fn parse_query(input: &str) -> (String, String) {
    match input.split_once(SEP) {
        Some((h, r)) => (h.to_string(), r.to_string()),
        None => (input.to_string(), String::new()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingTriple {
    pub query_text: String,
    pub positive_passage_id: String,
    pub hard_negative_passage_id: String,
}

pub fn write_triples<W: Write>(mut w: W, triples: &[TrainingTriple]) -> Result<()> {
    for t in triples {
        let fields = [&t.query_text, &t.positive_passage_id, &t.hard_negative_passage_id];
        if fields.iter().any(|f| f.contains(['\t', '\n'])) {
            return Err(Error::invalid(format!(
                "triple field contains a tab or newline: {:?}",
                t.query_text
            )));
        }
        writeln!(w, "{}\t{}\t{}", fields[0], fields[1], fields[2])
            .map_err(Error::io("writing triples"))?;
    }
    Ok(())
}

pub fn read_triples<R: BufRead>(r: R, source: &str) -> Result<Vec<TrainingTriple>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(Error::io(format!("reading {source}")))?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let [q, p, n] = parts[..] else {
            return Err(Error::Parse {
                path: source.to_string(),
                line: i + 1,
                message: format!("expected 3 tab-separated fields, found {}", parts.len()),
            });
        };
        out.push(TrainingTriple {
            query_text: q.to_string(),
            positive_passage_id: p.to_string(),
            hard_negative_passage_id: n.to_string(),
        });
    }
    Ok(out)
}
