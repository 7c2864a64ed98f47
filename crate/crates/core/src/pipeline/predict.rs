use std::io::{Read, Write};

use rayon::prelude::*;
use serde::Serialize;

use super::config::{DecodeConfig, RetrieverMode};
use crate::annindex::HnswIndex;
use crate::binio::{BinReader, BinWriter};
use crate::corpus::{Passage, PassageStore};
use crate::error::{Error, Result};
use crate::generator::{beam_search, retrieval_weights, GeneratorParams, Mixture};
use crate::lexical::LexicalIndex;
use crate::metrics::Prediction;
use crate::ragtrain::RagState;
use crate::retriever::{render_query, EncoderParams, Side, SlotQuery};

const CKPT_MAGIC: &[u8] = b"KGICKPT1";

/// Trained generator and encoders, tied to the index they were trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: RagState,
    /// Fine-tuning configuration as JSON.
    pub config_json: String,
    /// sha256 of the ANN index file used during training.
    pub ann_sha256: String,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BinWriter::new(w);
        w.bytes(CKPT_MAGIC)?;
        w.str(&self.config_json)?;
        w.str(&self.ann_sha256)?;
        self.state.generator.write_section(&mut w)?;
        self.state.encoder.write_section(&mut w)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BinReader::new(r);
        r.expect_magic(CKPT_MAGIC)?;
        let config_json = r.str()?;
        let ann_sha256 = r.str()?;
        let generator = GeneratorParams::read_section(&mut r)?;
        let encoder = EncoderParams::read_section(&mut r)?;
        r.finish()?;
        Ok(Self {
            state: RagState { generator, encoder },
            config_json,
            ann_sha256,
        })
    }
}

/// Everything needed to answer slot queries.
pub struct Predictor {
    pub store: PassageStore,
    pub ann: HnswIndex,
    pub bm25: LexicalIndex,
    pub state: RagState,
    pub decode: DecodeConfig,
    pub ef_search: usize,
}

impl Predictor {
    pub fn with_mode(mut self, mode: RetrieverMode) -> Self {
        self.decode.retriever = mode;
        self
    }

    /// Retrieved passages with their raw scores, best first.
    pub fn retrieve(&self, query_text: &str) -> Result<Vec<(&Passage, f64)>> {
        let n = self.decode.n_retrieve;
        let hits: Vec<(String, f64)> = match self.decode.retriever {
            RetrieverMode::Dense => {
                let q = self.state.encoder.encode(Side::Query, query_text);
                self.ann.search(&q, n, self.ef_search)?
            }
            RetrieverMode::Bm25 => self.bm25.search(query_text, n),
        };
        hits.into_iter()
            .map(|(id, s)| Ok((self.store.require(&id)?, s)))
            .collect()
    }

    pub fn predict_one(&self, query_id: &str, query_text: &str) -> Result<Prediction> {
        let hits = self.retrieve(query_text)?;
        if hits.is_empty() {
            return Ok(Prediction::new(query_id, "", Vec::new(), f64::NEG_INFINITY));
        }
        let scores: Vec<f64> = hits.iter().map(|h| h.1).collect();
        let texts: Vec<&str> = hits.iter().map(|h| h.0.text.as_str()).collect();
        let mixture = Mixture::new(query_text, &texts, &retrieval_weights(&scores)?)?;
        let best = beam_search(&self.state.generator, &mixture, self.decode.beam, self.decode.max_len)?;
        Ok(Prediction::new(
            query_id,
            best.text(),
            hits.iter().map(|h| h.0.document_id.clone()),
            best.log_prob,
        ))
    }

    /// One prediction per query, in query order.
    pub fn predict(&self, queries: &[SlotQuery]) -> Result<Vec<Prediction>> {
        queries
            .par_iter()
            .map(|q| self.predict_one(&q.id, &q.query_text()))
            .collect()
    }

    pub fn fill_infobox(&self, entity: &str, relations: &[String]) -> Result<Infobox> {
        if relations.is_empty() {
            return Err(Error::invalid("an infobox needs at least one relation"));
        }
        let rows = relations
            .iter()
            .map(|rel| {
                let p = self.predict_one(rel, &render_query(entity, rel))?;
                Ok(InfoboxRow {
                    relation: rel.clone(),
                    filler: p.answer,
                    page: p.provenance.into_iter().next(),
                    score: p.score.is_finite().then_some(p.score),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Infobox {
            entity: entity.to_string(),
            rows,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfoboxRow {
    pub relation: String,
    pub filler: String,
    /// Top provenance page.
    pub page: Option<String>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Infobox {
    pub entity: String,
    pub rows: Vec<InfoboxRow>,
}

impl Infobox {
    pub fn to_text(&self) -> String {
        let header = ["relation", "filler", "source"];
        let cells: Vec<[&str; 3]> = self
            .rows
            .iter()
            .map(|r| [r.relation.as_str(), r.filler.as_str(), r.page.as_deref().unwrap_or("-")])
            .collect();
        let widths: Vec<usize> = (0..3)
            .map(|i| cells.iter().map(|c| c[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let line = |c: [&str; 3]| {
            format!("| {:<w0$} | {:<w1$} | {:<w2$} |\n", c[0], c[1], c[2], w0 = widths[0], w1 = widths[1], w2 = widths[2])
        };
        let rule = format!(
            "+{}+{}+{}+\n",
            "-".repeat(widths[0] + 2),
            "-".repeat(widths[1] + 2),
            "-".repeat(widths[2] + 2)
        );
        let mut out = format!("{}\n{rule}{}{rule}", self.entity, line(header));
        for c in cells {
            out.push_str(&line(c));
        }
        out.push_str(&rule);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("infobox serializes")
    }
}
