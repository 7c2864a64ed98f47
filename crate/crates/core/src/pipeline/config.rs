use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annindex::{HnswParams, DEFAULT_EF_CONSTRUCTION, DEFAULT_EF_SEARCH, DEFAULT_M};
use crate::corpus::DEFAULT_MAX_PASSAGE_TOKENS;
use crate::error::{Error, Result};
use crate::generator::{DEFAULT_BEAM, DEFAULT_MAX_LEN, DEFAULT_N_RETRIEVE};
use crate::lexical::Bm25Params;
use crate::ragtrain::RagTrainConfig;
use crate::retriever::{TrainConfig, DEFAULT_BUCKETS, DEFAULT_DIM, DEFAULT_POOL_SIZE};
use crate::synthetic::SYNTHETIC_MAX_PASSAGE_TOKENS;

/// File locations, relative to the working directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub passages: PathBuf,
    pub bm25_index: PathBuf,
    pub triples: PathBuf,
    pub encoder: PathBuf,
    pub dpr_log: PathBuf,
    pub vectors: PathBuf,
    pub ann_index: PathBuf,
    pub checkpoint: PathBuf,
    pub rag_log: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
    pub report_text: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus.jsonl".into(),
            train: "train.jsonl".into(),
            dev: "dev.jsonl".into(),
            passages: "passages.jsonl".into(),
            bm25_index: "bm25.idx".into(),
            triples: "triples.tsv".into(),
            encoder: "encoder.bin".into(),
            dpr_log: "dpr_log.jsonl".into(),
            vectors: "vectors.bin".into(),
            ann_index: "ann.idx".into(),
            checkpoint: "rag.ckpt".into(),
            rag_log: "rag_log.jsonl".into(),
            predictions: "predictions.jsonl".into(),
            report: "report.json".into(),
            report_text: "report.txt".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub max_passage_tokens: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            max_passage_tokens: DEFAULT_MAX_PASSAGE_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub pool_size: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            pool_size: DEFAULT_POOL_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub buckets: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            buckets: DEFAULT_BUCKETS,
            dim: DEFAULT_DIM,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnConfig {
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for AnnConfig {
    fn default() -> Self {
        Self {
            m: DEFAULT_M,
            ef_construction: DEFAULT_EF_CONSTRUCTION,
            ef_search: DEFAULT_EF_SEARCH,
            seed: 0,
        }
    }
}

impl AnnConfig {
    pub fn hnsw(&self) -> HnswParams {
        HnswParams {
            m: self.m,
            ef_construction: self.ef_construction,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverMode {
    Dense,
    Bm25,
}

impl std::str::FromStr for RetrieverMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "bm25" => Ok(Self::Bm25),
            other => Err(Error::Config(format!("retriever must be `dense` or `bm25`, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
    pub n_retrieve: usize,
    pub retriever: RetrieverMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: DEFAULT_BEAM,
            max_len: DEFAULT_MAX_LEN,
            n_retrieve: DEFAULT_N_RETRIEVE,
            retriever: RetrieverMode::Dense,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub bm25: Bm25Params,
    #[serde(default)]
    pub mining: MiningConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "TrainConfig::dpr")]
    pub dpr: TrainConfig,
    #[serde(default)]
    pub ann: AnnConfig,
    #[serde(default)]
    pub rag: RagTrainConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            bm25: Bm25Params::default(),
            mining: MiningConfig::default(),
            encoder: EncoderConfig::default(),
            dpr: TrainConfig::dpr(),
            ann: AnnConfig::default(),
            rag: RagTrainConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Settings for the generated corpus: its 800 training queries cannot
    /// fill the reference batch sizes and rates, so those are scaled down.
    pub fn synthetic() -> Self {
        let mut c = Self::default();
        c.corpus.max_passage_tokens = SYNTHETIC_MAX_PASSAGE_TOKENS;
        c.encoder = EncoderConfig {
            buckets: 1 << 14,
            dim: 64,
            seed: 1,
        };
        c.dpr.learn_rate = 5e-2;
        c.dpr.batch_size = 64;
        c.dpr.epochs = 30;
        c.dpr.seed = 2;
        c.rag.train.learn_rate = 1e-1;
        c.rag.train.batch_size = 32;
        c.rag.train.epochs = 5;
        c.rag.train.warmup_instances = 200;
        c.rag.train.seed = 3;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::InvalidInput(m) => Error::Config(m),
            other => other,
        };
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.into())) };
        check(self.corpus.max_passage_tokens >= 1, "corpus.max_passage_tokens must be >= 1")?;
        self.bm25.validate().map_err(cfg)?;
        check(self.mining.pool_size >= 1, "mining.pool_size must be >= 1")?;
        check(self.encoder.buckets >= 1 && self.encoder.dim >= 1, "encoder buckets and dim must be >= 1")?;
        self.dpr.validate().map_err(cfg)?;
        self.rag.train.validate().map_err(cfg)?;
        check(self.rag.n_retrieve >= 1, "rag.n_retrieve must be >= 1")?;
        check(self.ann.m >= 2, "ann.m must be >= 2")?;
        check(self.ann.ef_construction >= 1 && self.ann.ef_search >= 1, "ann ef values must be >= 1")?;
        check(self.decode.beam >= 1, "decode.beam must be >= 1")?;
        check(self.decode.max_len >= 1, "decode.max_len must be >= 1")?;
        check(self.decode.n_retrieve >= 1, "decode.n_retrieve must be >= 1")?;
        Ok(())
    }
}
