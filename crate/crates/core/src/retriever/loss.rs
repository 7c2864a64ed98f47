//! In-batch negative log-likelihood for the dual encoder.
//!
//! For a batch of B triples the candidate set holds the B positives followed
//! by the B hard negatives. Query i scores every candidate by inner product
//! and the loss is the mean of -log softmax(S[i])[i].

use super::encoder::{dot, passage_input, EncoderParams, Features, Side, SparseColumns};
use super::TrainingTriple;
use crate::corpus::PassageStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncoderGrads {
    pub query: SparseColumns,
    pub passage: SparseColumns,
}

impl EncoderGrads {
    pub fn new(dim: usize) -> Self {
        Self {
            query: SparseColumns::new(dim),
            passage: SparseColumns::new(dim),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.query.norm_sq() + self.passage.norm_sq()).sqrt()
    }

    pub fn side(&self, side: Side) -> &SparseColumns {
        match side {
            Side::Query => &self.query,
            Side::Passage => &self.passage,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub grads: EncoderGrads,
    /// Row-wise softmax of the B×2B score matrix.
    pub probabilities: Vec<Vec<f64>>,
}

struct Featurized {
    queries: Vec<Features>,
    candidates: Vec<Features>,
}

fn featurize(
    params: &EncoderParams,
    batch: &[TrainingTriple],
    store: &PassageStore,
) -> Result<Featurized> {
    let text = |id: &str| -> Result<String> { Ok(passage_input(store.require(id)?)) };
    let queries = batch.iter().map(|t| params.features(&t.query_text)).collect();
    let mut candidates = Vec::with_capacity(2 * batch.len());
    for t in batch {
        candidates.push(params.features(&text(&t.positive_passage_id)?));
    }
    for t in batch {
        candidates.push(params.features(&text(&t.hard_negative_passage_id)?));
    }
    Ok(Featurized {
        queries,
        candidates,
    })
}

pub fn batch_loss(
    params: &EncoderParams,
    batch: &[TrainingTriple],
    store: &PassageStore,
) -> Result<BatchLoss> {
    let f = featurize(params, batch, store)?;
    batch_loss_features(params, &f.queries, &f.candidates)
}

pub fn in_batch_probabilities(
    params: &EncoderParams,
    batch: &[TrainingTriple],
    store: &PassageStore,
) -> Result<Vec<Vec<f64>>> {
    Ok(batch_loss(params, batch, store)?.probabilities)
}

/// Loss and exact gradients over pre-featurized inputs. `candidates` holds the
/// positives (candidate i is query i's positive) followed by the negatives.
pub fn batch_loss_features(
    params: &EncoderParams,
    queries: &[Features],
    candidates: &[Features],
) -> Result<BatchLoss> {
    let b = queries.len();
    if b < 2 {
        return Err(Error::invalid(format!("batch size must be at least 2, got {b}")));
    }
    if candidates.len() != 2 * b {
        return Err(Error::invalid(format!(
            "expected {} candidates for {b} queries, got {}",
            2 * b,
            candidates.len()
        )));
    }
    let q: Vec<Vec<f64>> = queries.iter().map(|f| params.project(Side::Query, f)).collect();
    let p: Vec<Vec<f64>> = candidates
        .iter()
        .map(|f| params.project(Side::Passage, f))
        .collect();

    let dim = params.dim();
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut probabilities = Vec::with_capacity(b);
    let mut dq = vec![vec![0.0; dim]; b];
    let mut dp = vec![vec![0.0; dim]; 2 * b];
    for i in 0..b {
        let scores: Vec<f64> = p.iter().map(|pj| dot(&q[i], pj)).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += max - scores[i] + z.ln();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        for (j, pr) in probs.iter().enumerate() {
            let g = (pr - if i == j { 1.0 } else { 0.0 }) * inv_b;
            if g == 0.0 {
                continue;
            }
            for k in 0..dim {
                dq[i][k] += g * p[j][k];
                dp[j][k] += g * q[i][k];
            }
        }
        probabilities.push(probs);
    }

    let mut grads = EncoderGrads::new(dim);
    for (g, f) in dq.iter().zip(queries) {
        grads.query.add_outer(g, f);
    }
    for (g, f) in dp.iter().zip(candidates) {
        grads.passage.add_outer(g, f);
    }
    Ok(BatchLoss {
        loss: loss * inv_b,
        grads,
        probabilities,
    })
}
