//! BM25 inverted index over passages.
//!
//! Passages are assigned ordinals in ascending `passage_id` order, so postings
//! sorted by ordinal are sorted by id and ordinal ties break like id ties.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::binio::{BinReader, BinWriter};
use crate::corpus::{tokenize, Passage};
use crate::error::{Error, Result};

pub const DEFAULT_K1: f64 = 0.9;
pub const DEFAULT_B: f64 = 0.4;

const MAGIC: &[u8] = b"KGILEX1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 >= 0.0 && self.k1.is_finite()) {
            return Err(Error::invalid(format!("bm25 k1 must be >= 0, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::invalid(format!("bm25 b must be in [0,1], got {}", self.b)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Posting {
    ordinal: u32,
    tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LexicalIndex {
    params: Bm25Params,
    /// Passage ids sorted ascending; position is the ordinal.
    ids: Vec<String>,
    lengths: Vec<u32>,
    postings: HashMap<String, Vec<Posting>>,
    avg_len: f64,
}

impl LexicalIndex {
    pub fn build(passages: &[Passage], params: Bm25Params) -> Result<Self> {
        params.validate()?;
        if passages.is_empty() {
            return Err(Error::invalid("cannot build a BM25 index over zero passages"));
        }
        let mut order: Vec<&Passage> = passages.iter().collect();
        order.sort_by(|a, b| a.passage_id.cmp(&b.passage_id));
        if let Some(w) = order.windows(2).find(|w| w[0].passage_id == w[1].passage_id) {
            return Err(Error::DuplicateId(w[0].passage_id.clone()));
        }

        let mut ids = Vec::with_capacity(order.len());
        let mut lengths = Vec::with_capacity(order.len());
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        for (ordinal, p) in order.iter().enumerate() {
            let tokens = tokenize(&p.text);
            lengths.push(tokens.len() as u32);
            ids.push(p.passage_id.clone());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    ordinal: ordinal as u32,
                    tf: count,
                });
            }
        }
        let total: u64 = lengths.iter().map(|&l| l as u64).sum();
        let avg_len = total as f64 / ids.len() as f64;
        Ok(Self {
            params,
            ids,
            lengths,
            postings,
            avg_len,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    /// Passage ids in ascending order.
    pub fn passage_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.ids.len() as f64;
        let df = self.document_frequency(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, tf: u32, len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = 1.0 - b + b * len as f64 / self.avg_len;
        tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// Top-`k` passages by descending BM25 score, ties by ascending id.
    /// Passages sharing no term with the query are never returned.
    pub fn search(&self, query: &str, k: usize) -> Vec<(String, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut acc = vec![0.0f64; self.ids.len()];
        let mut touched = Vec::new();
        // Every query token occurrence contributes, so repeated terms weigh more.
        for term in tokenize(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for p in list {
                let slot = &mut acc[p.ordinal as usize];
                if *slot == 0.0 {
                    touched.push(p.ordinal);
                }
                *slot += idf * self.term_weight(p.tf, self.lengths[p.ordinal as usize]);
            }
        }
        let mut hits: Vec<(u32, f64)> = touched
            .into_iter()
            .map(|o| (o, acc[o as usize]))
            .filter(|&(_, s)| s > 0.0)
            .collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.truncate(k);
        hits.into_iter()
            .map(|(o, s)| (self.ids[o as usize].clone(), s))
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BinWriter::new(w);
        w.bytes(MAGIC)?;
        w.f64(self.params.k1)?;
        w.f64(self.params.b)?;
        w.usize(self.ids.len())?;
        for (id, len) in self.ids.iter().zip(&self.lengths) {
            w.str(id)?;
            w.u32(*len)?;
        }
        let mut terms: Vec<&String> = self.postings.keys().collect();
        terms.sort();
        w.usize(terms.len())?;
        for term in terms {
            let list = &self.postings[term];
            w.str(term)?;
            w.usize(list.len())?;
            for p in list {
                w.u32(p.ordinal)?;
                w.u32(p.tf)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BinReader::new(r);
        r.expect_magic(MAGIC)?;
        let params = Bm25Params {
            k1: r.f64()?,
            b: r.f64()?,
        };
        params.validate()?;
        let n = r.len(u32::MAX as usize)?;
        if n == 0 {
            return Err(Error::Format("empty lexical index".into()));
        }
        let mut ids = Vec::with_capacity(n);
        let mut lengths = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(r.str()?);
            lengths.push(r.u32()?);
        }
        let n_terms = r.len(usize::MAX)?;
        let mut postings = HashMap::with_capacity(n_terms);
        for _ in 0..n_terms {
            let term = r.str()?;
            let m = r.len(n)?;
            let mut list = Vec::with_capacity(m);
            for _ in 0..m {
                let ordinal = r.u32()?;
                if ordinal as usize >= n {
                    return Err(Error::Format(format!("posting ordinal {ordinal} out of range")));
                }
                list.push(Posting { ordinal, tf: r.u32()? });
            }
            postings.insert(term, list);
        }
        r.finish()?;
        let total: u64 = lengths.iter().map(|&l| l as u64).sum();
        Ok(Self {
            params,
            avg_len: total as f64 / n as f64,
            ids,
            lengths,
            postings,
        })
    }
}
