//! Document ingestion and paragraph-aligned passage segmentation.
//!
//! Documents arrive as ordered paragraphs. Consecutive paragraphs are packed
//! greedily into passages while the combined token count fits the budget; a
//! paragraph that alone exceeds the budget becomes its own truncated passage.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_PASSAGE_TOKENS: usize = 100;

/// Byte spans of the tokens of `text`.
///
/// A token is a maximal run of alphanumeric characters.
fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Lowercased tokens split on every maximal run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    token_spans(text)
        .into_iter()
        .map(|(s, e)| text[s..e].to_lowercase())
        .collect()
}

/// Number of tokens `tokenize` would produce, without allocating them.
pub fn token_count(text: &str) -> usize {
    token_spans(text).len()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "id")]
    pub document_id: String,
    pub title: String,
    pub paragraphs: Vec<String>,
}

impl Document {
    fn validate(&self) -> Result<()> {
        if self.paragraphs.is_empty() {
            return Err(Error::MalformedDocument {
                id: self.document_id.clone(),
                reason: "no paragraphs".into(),
            });
        }
        if let Some(i) = self.paragraphs.iter().position(|p| p.is_empty()) {
            return Err(Error::MalformedDocument {
                id: self.document_id.clone(),
                reason: format!("paragraph {i} is empty"),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    #[serde(rename = "pid")]
    pub passage_id: String,
    #[serde(rename = "doc_id")]
    pub document_id: String,
    pub title: String,
    pub text: String,
    /// Inclusive paragraph ordinals covered by this passage.
    #[serde(rename = "range")]
    pub paragraph_range: (usize, usize),
    pub truncated: bool,
}

impl Passage {
    /// True when both passages come from the same document and share a paragraph.
    pub fn overlaps(&self, other: &Passage) -> bool {
        self.document_id == other.document_id
            && self.paragraph_range.0 <= other.paragraph_range.1
            && other.paragraph_range.0 <= self.paragraph_range.1
    }
}

fn passage_id(document_id: &str, ordinal: usize) -> String {
    format!("{document_id}#{ordinal}")
}

/// Split a document into passages of at most `max_passage_tokens` tokens.
pub fn segment_document(doc: &Document, max_passage_tokens: usize) -> Result<Vec<Passage>> {
    if max_passage_tokens == 0 {
        return Err(Error::invalid("max_passage_tokens must be at least 1"));
    }
    doc.validate()?;

    let mut passages = Vec::new();
    let mut emit = |range: (usize, usize), text: String, truncated: bool| {
        let ordinal = passages.len();
        passages.push(Passage {
            passage_id: passage_id(&doc.document_id, ordinal),
            document_id: doc.document_id.clone(),
            title: doc.title.clone(),
            text,
            paragraph_range: range,
            truncated,
        });
    };

    // (first paragraph, token count) of the passage under construction
    let mut open: Option<(usize, usize)> = None;
    for (i, paragraph) in doc.paragraphs.iter().enumerate() {
        let spans = token_spans(paragraph);
        let n = spans.len();
        if n > max_passage_tokens {
            if let Some((first, _)) = open.take() {
                emit((first, i - 1), doc.paragraphs[first..i].join("\n"), false);
            }
            let cut = spans[max_passage_tokens - 1].1;
            emit((i, i), paragraph[..cut].to_string(), true);
            continue;
        }
        open = match open {
            Some((first, count)) if count + n <= max_passage_tokens => Some((first, count + n)),
            Some((first, _)) => {
                emit((first, i - 1), doc.paragraphs[first..i].join("\n"), false);
                Some((i, n))
            }
            None => Some((i, n)),
        };
    }
    if let Some((first, _)) = open {
        let last = doc.paragraphs.len() - 1;
        emit((first, last), doc.paragraphs[first..].join("\n"), false);
    }
    Ok(passages)
}

/// Documents in ingest order with lookup by id. Immutable once built.
#[derive(Debug, Clone, Default)]
pub struct DocumentStore {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl DocumentStore {
    pub fn from_documents(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            d.validate()?;
            if by_id.insert(d.document_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(d.document_id.clone()));
            }
        }
        Ok(Self { docs, by_id })
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Document> {
        self.docs.iter()
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Segment every document; output follows ingest order.
    pub fn segment(&self, max_passage_tokens: usize) -> Result<Vec<Passage>> {
        let per_doc: Vec<Vec<Passage>> = self
            .docs
            .par_iter()
            .map(|d| segment_document(d, max_passage_tokens))
            .collect::<Result<_>>()?;
        Ok(per_doc.into_iter().flatten().collect())
    }
}

#[derive(Deserialize)]
struct DocumentRecord {
    id: String,
    title: String,
    paragraphs: Vec<String>,
}

/// Read the corpus JSONL format. `source` names the input in error messages.
pub fn ingest<R: BufRead>(reader: R, source: &str) -> Result<DocumentStore> {
    let mut docs = Vec::new();
    let mut by_id = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(Error::io(format!("reading {source}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: source.to_string(),
            line: lineno,
            message,
        };
        let rec: DocumentRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let doc = Document {
            document_id: rec.id,
            title: rec.title,
            paragraphs: rec.paragraphs,
        };
        doc.validate().map_err(|e| parse_err(e.to_string()))?;
        if by_id.insert(doc.document_id.clone(), docs.len()).is_some() {
            return Err(parse_err(format!("duplicate document id `{}`", doc.document_id)));
        }
        docs.push(doc);
    }
    Ok(DocumentStore { docs, by_id })
}

pub fn write_documents<W: Write>(mut w: W, docs: &[Document]) -> Result<()> {
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(Error::io("writing corpus"))?;
    }
    Ok(())
}

/// Passages keyed by id, preserving segmentation order.
#[derive(Debug, Clone, Default)]
pub struct PassageStore {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
    by_doc: HashMap<String, Vec<usize>>,
}

impl PassageStore {
    pub fn new(passages: Vec<Passage>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        let mut by_doc: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, p) in passages.iter().enumerate() {
            if by_id.insert(p.passage_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(p.passage_id.clone()));
            }
            by_doc.entry(p.document_id.clone()).or_default().push(i);
        }
        Ok(Self {
            passages,
            by_id,
            by_doc,
        })
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn require(&self, id: &str) -> Result<&Passage> {
        self.get(id).ok_or_else(|| Error::UnknownPassage(id.to_string()))
    }

    /// Passages of one document in paragraph order.
    pub fn of_document<'a>(&'a self, doc_id: &str) -> impl Iterator<Item = &'a Passage> + 'a {
        self.by_doc
            .get(doc_id)
            .into_iter()
            .flatten()
            .map(move |&i| &self.passages[i])
    }

    pub fn as_slice(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }
}

pub fn write_passages<W: Write>(mut w: W, passages: &[Passage]) -> Result<()> {
    for p in passages {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(Error::io("writing passages"))?;
    }
    Ok(())
}

pub fn read_passages<R: BufRead>(reader: R, source: &str) -> Result<Vec<Passage>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::io(format!("reading {source}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let p = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}
