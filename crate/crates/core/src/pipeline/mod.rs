//! The staged workflow: segment → index-bm25 → mine → train-dpr → encode →
//! build-ann → train-rag → predict → evaluate.
//!
//! Every artifact carries a sidecar with the cumulative configuration hash of
//! the stage that wrote it and the fingerprints of that stage's inputs. A
//! stage refuses inputs that are missing, edited, or produced under a
//! different configuration. Paths are excluded from hashing, so identical
//! configurations produce identical bytes in any working directory.

mod artifact;
mod config;
mod predict;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::info;
use serde_json::json;

pub use artifact::{meta_path, sha256_hex, ArtifactMeta};
pub use config::{
    AnnConfig, CorpusConfig, DecodeConfig, EncoderConfig, MiningConfig, Paths, PipelineConfig,
    RetrieverMode,
};
pub use predict::{Checkpoint, Infobox, InfoboxRow, Predictor};

use crate::annindex::{encode_corpus, read_vectors, write_vectors, HnswIndex};
use crate::corpus::{ingest, read_passages, write_documents, write_passages, PassageStore};
use crate::error::{Error, Result};
use crate::generator::GeneratorParams;
use crate::kilt::{load_queries, read_predictions, write_gold, write_predictions};
use crate::lexical::LexicalIndex;
use crate::metrics::score_dataset;
use crate::ragtrain::{train_rag, RagState};
use crate::retriever::{build_triples, read_triples, train_dpr, write_triples, EncoderParams, LossRecord, SlotQuery};
use crate::synthetic::{generate, SyntheticConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Segment,
    IndexBm25,
    Mine,
    TrainDpr,
    Encode,
    BuildAnn,
    TrainRag,
    Predict,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Segment,
        Stage::IndexBm25,
        Stage::Mine,
        Stage::TrainDpr,
        Stage::Encode,
        Stage::BuildAnn,
        Stage::TrainRag,
        Stage::Predict,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Segment => "segment",
            Stage::IndexBm25 => "index-bm25",
            Stage::Mine => "mine",
            Stage::TrainDpr => "train-dpr",
            Stage::Encode => "encode",
            Stage::BuildAnn => "build-ann",
            Stage::TrainRag => "train-rag",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Stages whose artifacts this stage reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Segment => &[],
            Stage::IndexBm25 => &[Stage::Segment],
            Stage::Mine => &[Stage::Segment, Stage::IndexBm25],
            Stage::TrainDpr => &[Stage::Segment, Stage::Mine],
            Stage::Encode => &[Stage::Segment, Stage::TrainDpr],
            Stage::BuildAnn => &[Stage::Encode],
            Stage::TrainRag => &[Stage::Segment, Stage::TrainDpr, Stage::BuildAnn],
            Stage::Predict => &[Stage::Segment, Stage::IndexBm25, Stage::BuildAnn, Stage::TrainRag],
            Stage::Evaluate => &[Stage::Predict],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// What a stage wrote, plus a human-readable summary.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub stage: Stage,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

struct Input {
    key: String,
    bytes: Vec<u8>,
    sha256: String,
}

impl Input {
    fn reader(&self) -> &[u8] {
        &self.bytes
    }
}

fn upstream_of(inputs: &[&Input]) -> BTreeMap<String, String> {
    inputs.iter().map(|i| (i.key.clone(), i.sha256.clone())).collect()
}

fn loss_log(records: &[LossRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub struct Pipeline {
    config: PipelineConfig,
    dir: PathBuf,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            dir: dir.into(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, rel: &Path) -> PathBuf {
        self.dir.join(rel)
    }

    fn section(&self, stage: Stage) -> serde_json::Value {
        let c = &self.config;
        match stage {
            Stage::Segment => json!(c.corpus),
            Stage::IndexBm25 => json!(c.bm25),
            Stage::Mine => json!(c.mining),
            Stage::TrainDpr => json!({ "encoder": c.encoder, "dpr": c.dpr }),
            Stage::Encode | Stage::Evaluate => json!({}),
            Stage::BuildAnn => {
                let h = c.ann.hnsw();
                json!({ "m": h.m, "ef_construction": h.ef_construction, "seed": h.seed })
            }
            Stage::TrainRag => json!(c.rag),
            Stage::Predict => json!({ "decode": c.decode, "ef_search": c.ann.ef_search }),
        }
    }

    /// Hash of this stage's settings and, recursively, of everything upstream.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let section = self.section(stage);
        let upstream: Vec<String> = stage.upstream().iter().map(|s| self.stage_hash(*s)).collect();
        let doc = json!({ "stage": stage.name(), "config": section, "upstream": upstream });
        sha256_hex(doc.to_string().as_bytes())
    }

    fn key(rel: &Path) -> String {
        rel.to_string_lossy().into_owned()
    }

    /// A user-supplied input file.
    fn raw_input(&self, rel: &Path) -> Result<Input> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(Error::MissingPrerequisite {
                stage: "synth".into(),
                path,
            });
        }
        let bytes = artifact::read_file(&path)?;
        Ok(Input {
            key: Self::key(rel),
            sha256: sha256_hex(&bytes),
            bytes,
        })
    }

    /// An artifact of `producer`, verified against its sidecar, the current
    /// configuration and the current state of its own inputs.
    fn require(&self, producer: Stage, rel: &Path) -> Result<Input> {
        let path = self.path(rel);
        let stale = |reason: String| Error::StaleArtifact {
            stage: producer.name().into(),
            path: path.clone(),
            reason,
        };
        if !path.exists() {
            return Err(Error::MissingPrerequisite {
                stage: producer.name().into(),
                path,
            });
        }
        let meta = artifact::read_meta(&path)?.ok_or_else(|| stale("no metadata sidecar".into()))?;
        let bytes = artifact::read_file(&path)?;
        let sha256 = sha256_hex(&bytes);
        if meta.stage != producer.name() {
            return Err(stale(format!("written by stage `{}`", meta.stage)));
        }
        if meta.sha256 != sha256 {
            return Err(stale("modified since it was written".into()));
        }
        if meta.config_hash != self.stage_hash(producer) {
            return Err(stale("configuration changed".into()));
        }
        for (name, recorded) in &meta.upstream {
            let current = artifact::read_file(&self.path(Path::new(name)))
                .map(|b| sha256_hex(&b))
                .unwrap_or_default();
            if &current != recorded {
                return Err(stale(format!("input `{name}` changed")));
            }
        }
        Ok(Input {
            key: Self::key(rel),
            bytes,
            sha256,
        })
    }

    fn emit(&self, stage: Stage, rel: &Path, bytes: &[u8], inputs: &[&Input]) -> Result<PathBuf> {
        let path = self.path(rel);
        artifact::write_artifact(&path, bytes, stage.name(), &self.stage_hash(stage), upstream_of(inputs))?;
        Ok(path)
    }

    fn passages(&self) -> Result<(Input, PassageStore)> {
        let input = self.require(Stage::Segment, &self.config.paths.passages)?;
        let passages = read_passages(input.reader(), &input.key)?;
        Ok((input, PassageStore::new(passages)?))
    }

    fn queries(&self, rel: &Path, store: Option<&PassageStore>) -> Result<(Input, Vec<SlotQuery>)> {
        let input = self.raw_input(rel)?;
        let queries = load_queries(input.reader(), &input.key, store)?;
        Ok((input, queries))
    }

    fn checkpoint(&self) -> Result<(Input, Checkpoint)> {
        let input = self.require(Stage::TrainRag, &self.config.paths.checkpoint)?;
        let ckpt = Checkpoint::read_from(input.reader())?;
        Ok((input, ckpt))
    }

    fn ann(&self) -> Result<(Input, HnswIndex)> {
        let input = self.require(Stage::BuildAnn, &self.config.paths.ann_index)?;
        let index = HnswIndex::read_from(input.reader())?;
        Ok((input, index))
    }

    fn bm25(&self) -> Result<(Input, LexicalIndex)> {
        let input = self.require(Stage::IndexBm25, &self.config.paths.bm25_index)?;
        let index = LexicalIndex::read_from(input.reader())?;
        Ok((input, index))
    }

    fn encoder(&self) -> Result<(Input, EncoderParams)> {
        let input = self.require(Stage::TrainDpr, &self.config.paths.encoder)?;
        let params = EncoderParams::read_from(input.reader())?;
        Ok((input, params))
    }

    /// Loads the trained model and indexes, checking that the checkpoint was
    /// trained against the current ANN index.
    pub fn predictor(&self) -> Result<Predictor> {
        let (_, store) = self.passages()?;
        let (ann_in, ann) = self.ann()?;
        let (_, bm25) = self.bm25()?;
        let (_, ckpt) = self.checkpoint()?;
        if ckpt.ann_sha256 != ann_in.sha256 {
            return Err(Error::StaleArtifact {
                stage: Stage::TrainRag.name().into(),
                path: self.path(&self.config.paths.checkpoint),
                reason: "checkpoint was trained against a different ANN index".into(),
            });
        }
        Ok(Predictor {
            store,
            ann,
            bm25,
            state: ckpt.state,
            decode: self.config.decode,
            ef_search: self.config.ann.ef_search,
        })
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageOutput> {
        let paths = &self.config.paths;
        let (artifacts, summary) = match stage {
            Stage::Segment => {
                let corpus = self.raw_input(&paths.corpus)?;
                let docs = ingest(corpus.reader(), &corpus.key)?;
                let passages = docs.segment(self.config.corpus.max_passage_tokens)?;
                let mut bytes = Vec::new();
                write_passages(&mut bytes, &passages)?;
                let out = self.emit(stage, &paths.passages, &bytes, &[&corpus])?;
                let truncated = passages.iter().filter(|p| p.truncated).count();
                (
                    vec![out],
                    format!("{} documents -> {} passages ({truncated} truncated)", docs.len(), passages.len()),
                )
            }
            Stage::IndexBm25 => {
                let (input, store) = self.passages()?;
                let index = LexicalIndex::build(store.as_slice(), self.config.bm25)?;
                let mut bytes = Vec::new();
                index.write_to(&mut bytes)?;
                let out = self.emit(stage, &paths.bm25_index, &bytes, &[&input])?;
                (vec![out], format!("indexed {} passages", index.len()))
            }
            Stage::Mine => {
                let (p_in, store) = self.passages()?;
                let (b_in, index) = self.bm25()?;
                let (t_in, queries) = self.queries(&paths.train, Some(&store))?;
                let mined = build_triples(&queries, &index, &store, self.config.mining.pool_size);
                let mut bytes = Vec::new();
                write_triples(&mut bytes, &mined.triples)?;
                let out = self.emit(stage, &paths.triples, &bytes, &[&p_in, &b_in, &t_in])?;
                (
                    vec![out],
                    format!("{} triples, {} queries dropped", mined.triples.len(), mined.dropped.len()),
                )
            }
            Stage::TrainDpr => {
                let (p_in, store) = self.passages()?;
                let t_in = self.require(Stage::Mine, &paths.triples)?;
                let triples = read_triples(t_in.reader(), &t_in.key)?;
                let e = self.config.encoder;
                let initial = EncoderParams::init(e.buckets, e.dim, e.seed)?;
                let outcome = train_dpr(&self.config.dpr, initial, &triples, &store)?;
                let mut bytes = Vec::new();
                outcome.params.write_to(&mut bytes)?;
                let inputs = [&p_in, &t_in];
                let enc = self.emit(stage, &paths.encoder, &bytes, &inputs)?;
                let log = self.emit(stage, &paths.dpr_log, &loss_log(&outcome.log)?, &inputs)?;
                let last = outcome.log.last().map_or(f64::NAN, |r| r.loss);
                (vec![enc, log], format!("{} steps, final batch loss {last:.4}", outcome.log.len()))
            }
            Stage::Encode => {
                let (p_in, store) = self.passages()?;
                let (e_in, params) = self.encoder()?;
                let vectors = encode_corpus(&params, store.as_slice());
                let ids: Vec<String> = store.as_slice().iter().map(|p| p.passage_id.clone()).collect();
                let mut bytes = Vec::new();
                write_vectors(&mut bytes, &ids, &vectors)?;
                let out = self.emit(stage, &paths.vectors, &bytes, &[&p_in, &e_in])?;
                (vec![out], format!("encoded {} passages", ids.len()))
            }
            Stage::BuildAnn => {
                let v_in = self.require(Stage::Encode, &paths.vectors)?;
                let (ids, vectors) = read_vectors(v_in.reader())?;
                let index = HnswIndex::build(ids, &vectors, self.config.ann.hnsw())?;
                let mut bytes = Vec::new();
                index.write_to(&mut bytes)?;
                let out = self.emit(stage, &paths.ann_index, &bytes, &[&v_in])?;
                (vec![out], format!("indexed {} vectors", index.len()))
            }
            Stage::TrainRag => {
                let (p_in, store) = self.passages()?;
                let (e_in, encoder) = self.encoder()?;
                let (a_in, index) = self.ann()?;
                let (t_in, queries) = self.queries(&paths.train, Some(&store))?;
                let initial = RagState {
                    generator: GeneratorParams::default(),
                    encoder,
                };
                let outcome = train_rag(&self.config.rag, &queries, &index, &store, initial)?;
                let ckpt = Checkpoint {
                    state: outcome.state,
                    config_json: serde_json::to_string(&self.config.rag)?,
                    ann_sha256: a_in.sha256.clone(),
                };
                let mut bytes = Vec::new();
                ckpt.write_to(&mut bytes)?;
                let inputs = [&p_in, &e_in, &a_in, &t_in];
                let c = self.emit(stage, &paths.checkpoint, &bytes, &inputs)?;
                let log = self.emit(stage, &paths.rag_log, &loss_log(&outcome.log)?, &inputs)?;
                let epochs: Vec<String> = outcome.epoch_losses.iter().map(|l| format!("{l:.4}")).collect();
                (
                    vec![c, log],
                    format!(
                        "epoch mean losses [{}], {} ungenerable visits skipped",
                        epochs.join(", "),
                        outcome.skipped
                    ),
                )
            }
            Stage::Predict => {
                let (_, queries) = self.queries(&paths.dev, None)?;
                let predictor = self.predictor()?;
                let preds = predictor.predict(&queries)?;
                let inputs = [
                    self.require(Stage::Segment, &paths.passages)?,
                    self.require(Stage::IndexBm25, &paths.bm25_index)?,
                    self.require(Stage::BuildAnn, &paths.ann_index)?,
                    self.require(Stage::TrainRag, &paths.checkpoint)?,
                    self.raw_input(&paths.dev)?,
                ];
                let mut bytes = Vec::new();
                write_predictions(&mut bytes, &preds)?;
                let refs: Vec<&Input> = inputs.iter().collect();
                let out = self.emit(stage, &paths.predictions, &bytes, &refs)?;
                (vec![out], format!("{} predictions", preds.len()))
            }
            Stage::Evaluate => {
                let p_in = self.require(Stage::Predict, &paths.predictions)?;
                let preds = read_predictions(p_in.reader(), &p_in.key)?;
                let (d_in, golds) = self.queries(&paths.dev, None)?;
                let report = score_dataset(&golds, &preds)?;
                let method = match self.config.decode.retriever {
                    RetrieverMode::Dense => "KGI (dense)",
                    RetrieverMode::Bm25 => "RAG+BM25",
                };
                let mut json_bytes = serde_json::to_vec_pretty(&json!({ "method": method, "report": report }))?;
                json_bytes.push(b'\n');
                let table = report.table(method);
                let j = self.emit(stage, &paths.report, &json_bytes, &[&p_in, &d_in])?;
                let t = self.emit(stage, &paths.report_text, table.as_bytes(), &[&p_in, &d_in])?;
                (vec![j, t], table)
            }
        };
        info!("{stage}: {summary}");
        Ok(StageOutput {
            stage,
            artifacts,
            summary,
        })
    }

    pub fn run_all(&self) -> Result<Vec<StageOutput>> {
        Stage::ALL.into_iter().map(|s| self.run_stage(s)).collect()
    }
}

/// Writes a generated corpus, its train/dev queries and `config` as
/// `kgi.toml` into `dir`.
pub fn write_synthetic(dir: &Path, synth: &SyntheticConfig, config: &PipelineConfig) -> Result<SyntheticSummary> {
    let corpus = generate(synth)?;
    let paths = &config.paths;
    let mut bytes = Vec::new();
    write_documents(&mut bytes, &corpus.documents)?;
    artifact::write_atomic(&dir.join(&paths.corpus), &bytes)?;
    for (rel, records) in [(&paths.train, &corpus.train), (&paths.dev, &corpus.dev)] {
        let mut bytes = Vec::new();
        write_gold(&mut bytes, records)?;
        artifact::write_atomic(&dir.join(rel), &bytes)?;
    }
    artifact::write_atomic(&dir.join(CONFIG_FILE), config.to_toml().as_bytes())?;
    Ok(SyntheticSummary {
        documents: corpus.documents.len(),
        train: corpus.train.len(),
        dev: corpus.dev.len(),
    })
}

pub const CONFIG_FILE: &str = "kgi.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSummary {
    pub documents: usize,
    pub train: usize,
    pub dev: usize,
}
