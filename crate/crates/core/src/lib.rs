//! Zero-shot slot filling over a passage corpus.
//!
//! The pipeline segments documents into paragraph-aligned passages, mines
//! BM25 hard negatives, trains a dual encoder with in-batch negatives, indexes
//! 8-bit quantized passage vectors in an HNSW graph, and fills slots by beam
//! search over a retrieval-weighted mixture of per-passage generators.

mod binio;
pub mod annindex;
pub mod corpus;
pub mod error;
pub mod generator;
pub mod kilt;
pub mod lexical;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod ragtrain;
pub mod retriever;
pub mod synthetic;

pub use error::{Error, Result};
