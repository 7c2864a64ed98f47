//! Joint fine-tuning of the generator weights and the query encoder against
//! the target filler, with passage vectors and the passage encoder frozen.
//!
//! Gradients flow into the query encoder only through the retrieval weights;
//! the retrieved set itself is treated as fixed for each step.

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annindex::{HnswIndex, DEFAULT_EF_SEARCH};
use crate::corpus::{tokenize, PassageStore};
use crate::error::{Error, Result};
use crate::generator::{
    retrieval_weights, GeneratorParams, PassageScorer, DEFAULT_N_RETRIEVE, EOS, N_FEATURES,
};
use crate::optim::{clip_factor, Adam};
use crate::retriever::{dot, lr_at, EncoderParams, LossRecord, Side, SlotQuery, SparseColumns, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RagState {
    pub generator: GeneratorParams,
    /// Only the query side is trained; the passage side is carried unchanged.
    pub encoder: EncoderParams,
}

/// One retrieved passage: its text and frozen (dequantized) vector.
#[derive(Debug, Clone, Copy)]
pub struct Retrieved<'a> {
    pub text: &'a str,
    pub vector: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllOutput {
    pub loss: f64,
    pub theta_grad: [f64; N_FEATURES],
    pub query_grad: SparseColumns,
    pub weights: Vec<f64>,
}

/// Tokenized answer followed by EOS.
pub fn target_tokens(answer: &str) -> Vec<String> {
    let mut t = tokenize(answer);
    t.push(EOS.to_string());
    t
}

/// Negative log-likelihood of `target` under the retrieval-weighted mixture,
/// with exact gradients for the generator weights and the query matrix.
pub fn sequence_nll(
    state: &RagState,
    query_text: &str,
    retrieved: &[Retrieved<'_>],
    target: &[String],
) -> Result<NllOutput> {
    if retrieved.is_empty() {
        return Err(Error::invalid("sequence_nll needs at least one retrieved passage"));
    }
    if target.last().is_none_or(|t| t != EOS) {
        return Err(Error::invalid("target must be non-empty and end with EOS"));
    }
    let enc = &state.encoder;
    let phi_q = enc.features(query_text);
    let q = enc.project(Side::Query, &phi_q);
    if let Some(r) = retrieved.iter().find(|r| r.vector.len() != q.len()) {
        return Err(Error::invalid(format!(
            "passage vector has {} dims, query encoder {}",
            r.vector.len(),
            q.len()
        )));
    }
    let scores: Vec<f64> = retrieved.iter().map(|r| dot(&q, r.vector)).collect();
    let weights = retrieval_weights(&scores)?;
    let scorers: Vec<PassageScorer> = retrieved
        .iter()
        .map(|r| PassageScorer::new(query_text, r.text))
        .collect();

    let theta = &state.generator;
    let mut loss = 0.0;
    let mut theta_grad = [0.0; N_FEATURES];
    // dL/dw_z
    let mut weight_grad = vec![0.0; retrieved.len()];
    let mut last: Option<&str> = None;
    for (t, y) in target.iter().enumerate() {
        let mut p_y = vec![0.0; scorers.len()];
        let mut dp_y = vec![[0.0; N_FEATURES]; scorers.len()];
        for (z, s) in scorers.iter().enumerate() {
            let Some(iy) = s.index_of(y) else { continue };
            let (probs, feats) = s.probs(theta, last);
            let mut expected = [0.0; N_FEATURES];
            for (p, f) in probs.iter().zip(&feats) {
                for k in 0..N_FEATURES {
                    expected[k] += p * f[k];
                }
            }
            p_y[z] = probs[iy];
            for k in 0..N_FEATURES {
                dp_y[z][k] = probs[iy] * (feats[iy][k] - expected[k]);
            }
        }
        let m: f64 = weights.iter().zip(&p_y).map(|(w, p)| w * p).sum();
        if m <= 0.0 {
            return Err(Error::UngenerableTarget {
                token: y.clone(),
                position: t,
            });
        }
        loss -= m.ln();
        for z in 0..scorers.len() {
            weight_grad[z] -= p_y[z] / m;
            for k in 0..N_FEATURES {
                theta_grad[k] -= weights[z] * dp_y[z][k] / m;
            }
        }
        last = Some(y);
    }

    let mean_g: f64 = weights.iter().zip(&weight_grad).map(|(w, g)| w * g).sum();
    let mut dq = vec![0.0; q.len()];
    for ((w, g), r) in weights.iter().zip(&weight_grad).zip(retrieved) {
        let ds = w * (g - mean_g);
        for (d, v) in dq.iter_mut().zip(r.vector) {
            *d += ds * v;
        }
    }
    let mut query_grad = SparseColumns::new(q.len());
    query_grad.add_outer(&dq, &phi_q);
    Ok(NllOutput {
        loss,
        theta_grad,
        query_grad,
        weights,
    })
}

/// Fine-tuning hyperparameters; the shared optimizer fields sit at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagTrainConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(default = "default_n_retrieve")]
    pub n_retrieve: usize,
    #[serde(default = "default_ef_search")]
    pub ef_search: usize,
    /// Retrieve by exhaustive scoring instead of the graph.
    #[serde(default)]
    pub exact_retrieval: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_train_instances: Option<usize>,
}

fn default_n_retrieve() -> usize {
    DEFAULT_N_RETRIEVE
}

fn default_ef_search() -> usize {
    DEFAULT_EF_SEARCH
}

impl Default for RagTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::rag(),
            n_retrieve: DEFAULT_N_RETRIEVE,
            ef_search: DEFAULT_EF_SEARCH,
            exact_retrieval: false,
            max_train_instances: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RagOutcome {
    pub state: RagState,
    pub log: Vec<LossRecord>,
    /// Mean loss of the trained-on instances in each epoch.
    pub epoch_losses: Vec<f64>,
    /// Instance visits skipped because no retrieved passage could generate the target.
    pub skipped: usize,
}

/// Top passages for `query` under the current query encoder, as node numbers.
pub fn retrieve(
    encoder: &EncoderParams,
    index: &HnswIndex,
    query_text: &str,
    n_retrieve: usize,
    ef_search: usize,
    exact: bool,
) -> Result<Vec<(usize, f64)>> {
    let q = encoder.encode(Side::Query, query_text);
    if exact {
        Ok(index.exact_nodes(&q, n_retrieve))
    } else {
        index.search_nodes(&q, n_retrieve, ef_search)
    }
}

struct Instance {
    query: String,
    target: Vec<String>,
}

pub fn train_rag(
    config: &RagTrainConfig,
    dataset: &[SlotQuery],
    index: &HnswIndex,
    store: &PassageStore,
    initial: RagState,
) -> Result<RagOutcome> {
    let tc = &config.train;
    tc.validate()?;
    if config.n_retrieve == 0 {
        return Err(Error::invalid("n_retrieve must be >= 1"));
    }
    let limit = config.max_train_instances.unwrap_or(usize::MAX);
    let instances: Vec<Instance> = dataset
        .iter()
        .take(limit)
        .map(|q| Instance {
            query: q.query_text(),
            target: target_tokens(q.gold_answers.first().map_or("", String::as_str)),
        })
        .collect();
    if instances.is_empty() {
        return Err(Error::invalid("empty RAG training set"));
    }
    if tc.batch_size > instances.len() {
        return Err(Error::invalid(format!(
            "batch_size {} exceeds the {} training instances",
            tc.batch_size,
            instances.len()
        )));
    }
    if index.dim() != initial.encoder.dim() {
        return Err(Error::invalid(format!(
            "index dimension {} differs from encoder dimension {}",
            index.dim(),
            initial.encoder.dim()
        )));
    }
    let mut state = initial;
    if tc.epochs == 0 {
        return Ok(RagOutcome {
            state,
            log: Vec::new(),
            epoch_losses: Vec::new(),
            skipped: 0,
        });
    }

    let buckets = state.encoder.buckets();
    let mut adam_theta = Adam::new(N_FEATURES, tc.adam());
    let mut adam_q = Adam::new(buckets * state.encoder.dim(), tc.adam());
    let mut dense = vec![0.0; buckets * state.encoder.dim()];

    let schedule = crate::retriever::epoch_batches(instances.len(), tc.batch_size, tc.epochs, tc.seed);
    let total: usize = schedule.iter().flatten().map(Vec::len).sum();
    let mut seen = 0;
    let mut log = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut skipped = 0;
    for epoch in &schedule {
        let (mut epoch_sum, mut epoch_n) = (0.0, 0usize);
        for batch in epoch {
            let lr = lr_at(tc, seen, total)?;
            seen += batch.len();
            let results: Vec<Result<NllOutput>> = batch
                .par_iter()
                .map(|&i| {
                    let inst = &instances[i];
                    let hits = retrieve(
                        &state.encoder,
                        index,
                        &inst.query,
                        config.n_retrieve,
                        config.ef_search,
                        config.exact_retrieval,
                    )?;
                    let retrieved = hits
                        .iter()
                        .map(|&(node, _)| {
                            Ok(Retrieved {
                                text: &store.require(index.passage_id(node))?.text,
                                vector: index.vector(node),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    sequence_nll(&state, &inst.query, &retrieved, &inst.target)
                })
                .collect();

            let mut theta_grad = [0.0; N_FEATURES];
            let mut query_grad = SparseColumns::new(state.encoder.dim());
            let (mut batch_loss, mut used) = (0.0, 0usize);
            for (r, &i) in results.into_iter().zip(batch) {
                match r {
                    Ok(out) => {
                        batch_loss += out.loss;
                        used += 1;
                        for k in 0..N_FEATURES {
                            theta_grad[k] += out.theta_grad[k];
                        }
                        query_grad.add(&out.query_grad);
                    }
                    Err(Error::UngenerableTarget { token, position }) => {
                        debug!("skipping `{}`: token `{token}` at {position} is ungenerable", instances[i].query);
                        skipped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            if used == 0 {
                continue;
            }
            let inv = 1.0 / used as f64;
            query_grad.scale(inv);
            theta_grad.iter_mut().for_each(|g| *g *= inv);
            let norm = (query_grad.norm_sq() + theta_grad.iter().map(|g| g * g).sum::<f64>()).sqrt();
            let clip = clip_factor(norm, tc.max_grad_norm);
            query_grad.scale(clip);
            theta_grad.iter_mut().for_each(|g| *g *= clip);

            adam_theta.step(&mut state.generator.theta, &theta_grad, lr);
            query_grad.scatter_into(&mut dense, buckets);
            adam_q.step(state.encoder.weights_mut(Side::Query), &dense, lr);
            query_grad.clear_from(&mut dense, buckets);

            let loss = batch_loss * inv;
            log.push(LossRecord {
                step: log.len(),
                loss,
                lr,
            });
            epoch_sum += batch_loss;
            epoch_n += used;
        }
        epoch_losses.push(if epoch_n == 0 { f64::NAN } else { epoch_sum / epoch_n as f64 });
    }
    if skipped > 0 {
        warn!("skipped {skipped} training visits with ungenerable targets");
    }
    Ok(RagOutcome {
        state,
        log,
        epoch_losses,
        skipped,
    })
}
