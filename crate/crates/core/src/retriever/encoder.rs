//! Linear dual encoder over feature-hashed bags of words.
//!
//! Each side maps the L2-normalized hashed token-count vector of its input
//! through its own d×V matrix (row-major). Passage inputs are the title and
//! text joined by a space.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{BinReader, BinWriter};
use crate::corpus::{tokenize, Passage};
use crate::error::{Error, Result};

pub const DEFAULT_BUCKETS: usize = 1 << 15;
pub const DEFAULT_DIM: usize = 128;
pub const INIT_RANGE: f64 = 0.01;

pub(crate) const CONTAINER_MAGIC: &[u8] = b"KGIENC1";
pub(crate) const ENC_TAG: &[u8] = b"ENC";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Query,
    Passage,
}

/// FNV-1a, stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Sparse L2-normalized hashed bag of words, sorted by bucket.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Features(pub Vec<(u32, f64)>);

impl Features {
    pub fn from_text(text: &str, buckets: usize) -> Self {
        let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
        for tok in tokenize(text) {
            let b = (fnv1a(tok.as_bytes()) % buckets as u64) as u32;
            *counts.entry(b).or_default() += 1.0;
        }
        let norm = counts.values().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Self::default();
        }
        Self(counts.into_iter().map(|(b, c)| (b, c / norm)).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn passage_input(passage: &Passage) -> String {
    format!("{} {}", passage.title, passage.text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    buckets: usize,
    dim: usize,
    query: Vec<f64>,
    passage: Vec<f64>,
}

impl EncoderParams {
    /// Entries drawn uniformly from [-0.01, 0.01] with a seeded generator.
    pub fn init(buckets: usize, dim: usize, seed: u64) -> Result<Self> {
        if buckets == 0 || dim == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE)).collect()
        };
        let query = draw(buckets * dim);
        let passage = draw(buckets * dim);
        Ok(Self {
            buckets,
            dim,
            query,
            passage,
        })
    }

    pub fn zeros(buckets: usize, dim: usize) -> Self {
        Self {
            buckets,
            dim,
            query: vec![0.0; buckets * dim],
            passage: vec![0.0; buckets * dim],
        }
    }

    pub fn from_parts(buckets: usize, dim: usize, query: Vec<f64>, passage: Vec<f64>) -> Result<Self> {
        let n = buckets * dim;
        if buckets == 0 || dim == 0 || query.len() != n || passage.len() != n {
            return Err(Error::invalid(format!(
                "encoder matrices must both hold {dim}x{buckets} values"
            )));
        }
        if query.iter().chain(&passage).any(|v| !v.is_finite()) {
            return Err(Error::invalid("encoder weights must be finite"));
        }
        Ok(Self {
            buckets,
            dim,
            query,
            passage,
        })
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major d×V matrix for `side`.
    pub fn weights(&self, side: Side) -> &[f64] {
        match side {
            Side::Query => &self.query,
            Side::Passage => &self.passage,
        }
    }

    pub fn weights_mut(&mut self, side: Side) -> &mut [f64] {
        match side {
            Side::Query => &mut self.query,
            Side::Passage => &mut self.passage,
        }
    }

    pub fn features(&self, text: &str) -> Features {
        Features::from_text(text, self.buckets)
    }

    pub fn project(&self, side: Side, feats: &Features) -> Vec<f64> {
        project(self.weights(side), self.buckets, self.dim, feats)
    }

    pub fn encode(&self, side: Side, text: &str) -> Vec<f64> {
        self.project(side, &self.features(text))
    }

    pub fn encode_passage(&self, passage: &Passage) -> Vec<f64> {
        self.encode(Side::Passage, &passage_input(passage))
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BinWriter::new(w);
        w.bytes(CONTAINER_MAGIC)?;
        self.write_section(&mut w)
    }

    pub(crate) fn write_section<W: Write>(&self, w: &mut BinWriter<W>) -> Result<()> {
        w.bytes(ENC_TAG)?;
        w.u32(2)?;
        w.usize(self.dim)?;
        w.usize(self.buckets)?;
        w.f64s(&self.query)?;
        w.f64s(&self.passage)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BinReader::new(r);
        r.expect_magic(CONTAINER_MAGIC)?;
        let params = Self::read_section(&mut r)?;
        r.finish()?;
        Ok(params)
    }

    pub(crate) fn read_section<R: Read>(r: &mut BinReader<R>) -> Result<Self> {
        r.expect_magic(ENC_TAG)?;
        if r.u32()? != 2 {
            return Err(Error::Format("encoder section must have 2 dims".into()));
        }
        let dim = r.len(1 << 16)?;
        let buckets = r.len(1 << 28)?;
        let query = r.f64s(dim * buckets)?;
        let passage = r.f64s(dim * buckets)?;
        Self::from_parts(buckets, dim, query, passage).map_err(|e| Error::Format(e.to_string()))
    }
}

pub(crate) fn project(weights: &[f64], buckets: usize, dim: usize, feats: &Features) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (r, o) in out.iter_mut().enumerate() {
        let row = &weights[r * buckets..(r + 1) * buckets];
        *o = feats.0.iter().map(|&(b, x)| row[b as usize] * x).sum();
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient of one d×V matrix, stored per touched bucket (column).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseColumns {
    dim: usize,
    cols: BTreeMap<u32, Vec<f64>>,
}

impl SparseColumns {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            cols: BTreeMap::new(),
        }
    }

    /// Accumulates the outer product `g ⊗ feats`.
    pub fn add_outer(&mut self, g: &[f64], feats: &Features) {
        for &(b, x) in &feats.0 {
            let col = self.cols.entry(b).or_insert_with(|| vec![0.0; self.dim]);
            for (c, gi) in col.iter_mut().zip(g) {
                *c += gi * x;
            }
        }
    }

    pub fn add(&mut self, other: &SparseColumns) {
        for (&b, src) in &other.cols {
            let col = self.cols.entry(b).or_insert_with(|| vec![0.0; self.dim]);
            for (c, s) in col.iter_mut().zip(src) {
                *c += s;
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for col in self.cols.values_mut() {
            col.iter_mut().for_each(|c| *c *= f);
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.cols.values().flatten().map(|c| c * c).sum()
    }

    /// Value of the gradient entry at (row, bucket).
    pub fn get(&self, row: usize, bucket: usize) -> f64 {
        self.cols.get(&(bucket as u32)).map_or(0.0, |c| c[row])
    }

    pub fn columns(&self) -> impl Iterator<Item = (u32, &[f64])> {
        self.cols.iter().map(|(&b, c)| (b, c.as_slice()))
    }

    /// Writes this gradient into a zeroed row-major d×V buffer.
    pub fn scatter_into(&self, dense: &mut [f64], buckets: usize) {
        for (&b, col) in &self.cols {
            for (r, v) in col.iter().enumerate() {
                dense[r * buckets + b as usize] = *v;
            }
        }
    }

    /// Zeroes the entries of `dense` this gradient touched.
    pub fn clear_from(&self, dense: &mut [f64], buckets: usize) {
        for &b in self.cols.keys() {
            for r in 0..self.dim {
                dense[r * buckets + b as usize] = 0.0;
            }
        }
    }

    pub fn to_dense(&self, buckets: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * buckets];
        self.scatter_into(&mut out, buckets);
        out
    }
}
