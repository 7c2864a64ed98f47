//! Quantized passage vectors served through an HNSW graph.

mod hnsw;
mod quantize;

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::binio::{BinReader, BinWriter};
use crate::corpus::Passage;
use crate::error::{Error, Result};
use crate::retriever::EncoderParams;

pub use hnsw::{
    brute_force, HnswIndex, HnswParams, DEFAULT_EF_CONSTRUCTION, DEFAULT_EF_SEARCH, DEFAULT_M,
};
pub use quantize::QuantizedVector;

/// Passage-side vectors in input order.
pub fn encode_corpus(params: &EncoderParams, passages: &[Passage]) -> Vec<Vec<f64>> {
    passages.par_iter().map(|p| params.encode_passage(p)).collect()
}

const VECTORS_MAGIC: &[u8] = b"KGIVEC1";

/// Passage vectors with their ids: magic, n, d, ids, then row-major values.
pub fn write_vectors<W: Write>(w: W, ids: &[String], vectors: &[Vec<f64>]) -> Result<()> {
    if ids.len() != vectors.len() {
        return Err(Error::invalid(format!("{} ids for {} vectors", ids.len(), vectors.len())));
    }
    let d = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::invalid("vectors differ in dimension"));
    }
    let mut w = BinWriter::new(w);
    w.bytes(VECTORS_MAGIC)?;
    w.usize(ids.len())?;
    w.usize(d)?;
    for id in ids {
        w.str(id)?;
    }
    for v in vectors {
        w.f64s(v)?;
    }
    Ok(())
}

pub fn read_vectors<R: Read>(r: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = BinReader::new(r);
    r.expect_magic(VECTORS_MAGIC)?;
    let n = r.len(u32::MAX as usize)?;
    let d = r.len(1 << 20)?;
    let ids = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let vectors = (0..n).map(|_| r.f64s(d)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok((ids, vectors))
}
