//! Dual-encoder training: hyperparameters, learning-rate schedules and the
//! Adam loop over shuffled batches of triples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{passage_input, EncoderParams, Features, Side};
use super::loss::batch_loss_features;
use super::TrainingTriple;
use crate::corpus::PassageStore;
use crate::error::{Error, Result};
use crate::optim::{clip_factor, Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Linear,
    Triangular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learn_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_instances: usize,
    #[serde(rename = "learning_schedule")]
    pub schedule: Schedule,
    pub max_grad_norm: f64,
    pub weight_decay: f64,
    pub adam_epsilon: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

impl TrainConfig {
    /// Retriever hyperparameters of the reference system.
    pub fn dpr() -> Self {
        Self {
            learn_rate: 5e-5,
            batch_size: 128,
            epochs: 2,
            warmup_instances: 0,
            schedule: Schedule::Linear,
            max_grad_norm: 1.0,
            weight_decay: 0.0,
            adam_epsilon: 1e-8,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            seed: 0,
        }
    }

    /// Generator fine-tuning hyperparameters of the reference system.
    pub fn rag() -> Self {
        Self {
            learn_rate: 3e-5,
            batch_size: 128,
            epochs: 1,
            warmup_instances: 10_000,
            schedule: Schedule::Triangular,
            ..Self::dpr()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.learn_rate > 0.0 && self.learn_rate.is_finite()) {
            return bad(format!("learn_rate must be > 0, got {}", self.learn_rate));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.max_grad_norm > 0.0) {
            return bad(format!("max_grad_norm must be > 0, got {}", self.max_grad_norm));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_epsilon > 0.0) || self.weight_decay < 0.0 {
            return bad("adam_epsilon must be > 0 and weight_decay >= 0".into());
        }
        Ok(())
    }

    pub(crate) fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// Learning rate after `step_instances` of `total_instances` training instances.
///
/// Linear decays from the base rate to zero. Triangular ramps up from zero over
/// `warmup_instances` and then decays linearly to zero at the end; a warmup at
/// least as long as training ramps for the whole run and returns zero at the end.
pub fn lr_at(config: &TrainConfig, step_instances: usize, total_instances: usize) -> Result<f64> {
    if total_instances == 0 {
        return Err(Error::invalid("learning-rate schedule over zero instances"));
    }
    if step_instances > total_instances {
        return Err(Error::invalid(format!(
            "step {step_instances} beyond total {total_instances}"
        )));
    }
    let base = config.learn_rate;
    let t = step_instances as f64;
    let total = total_instances as f64;
    let warmup = config.warmup_instances.min(total_instances);
    Ok(match config.schedule {
        Schedule::Linear => base * (1.0 - t / total),
        Schedule::Triangular if step_instances == total_instances => 0.0,
        Schedule::Triangular if step_instances < warmup => base * t / warmup as f64,
        Schedule::Triangular => base * (total - t) / (total - warmup as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub log: Vec<LossRecord>,
}

/// Batches of instance indices for every epoch, shuffled by one seeded stream.
/// A trailing batch smaller than 2 is dropped.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, epochs: usize, seed: u64) -> Vec<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..epochs)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order
                .chunks(batch_size)
                .filter(|c| c.len() >= 2)
                .map(<[usize]>::to_vec)
                .collect()
        })
        .collect()
}

/// Trains both encoders from `initial` with Adam, clipping the joint gradient
/// norm at `max_grad_norm`.
pub fn train_dpr(
    config: &TrainConfig,
    initial: EncoderParams,
    triples: &[TrainingTriple],
    store: &PassageStore,
) -> Result<TrainOutcome> {
    config.validate()?;
    if triples.is_empty() {
        return Err(Error::invalid("no training triples"));
    }
    if config.batch_size > triples.len() {
        return Err(Error::invalid(format!(
            "batch_size {} exceeds the {} available triples",
            config.batch_size,
            triples.len()
        )));
    }
    let mut params = initial;
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            params,
            log: Vec::new(),
        });
    }

    struct Instance {
        query: Features,
        positive: Features,
        negative: Features,
    }
    let instances: Vec<Instance> = triples
        .iter()
        .map(|t| {
            let pos = store.require(&t.positive_passage_id)?;
            let neg = store.require(&t.hard_negative_passage_id)?;
            Ok(Instance {
                query: params.features(&t.query_text),
                positive: params.features(&passage_input(pos)),
                negative: params.features(&passage_input(neg)),
            })
        })
        .collect::<Result<_>>()?;

    let buckets = params.buckets();
    let n_weights = buckets * params.dim();
    let mut adam_q = Adam::new(n_weights, config.adam());
    let mut adam_p = Adam::new(n_weights, config.adam());
    let mut dense = vec![0.0; n_weights];

    let schedule = epoch_batches(instances.len(), config.batch_size, config.epochs, config.seed);
    let total: usize = schedule.iter().flatten().map(Vec::len).sum();
    let mut seen = 0usize;
    let mut log = Vec::new();
    for batch in schedule.iter().flatten() {
        let lr = lr_at(config, seen, total)?;
        let queries: Vec<Features> = batch.iter().map(|&i| instances[i].query.clone()).collect();
        let candidates: Vec<Features> = batch
            .iter()
            .map(|&i| instances[i].positive.clone())
            .chain(batch.iter().map(|&i| instances[i].negative.clone()))
            .collect();
        let mut out = batch_loss_features(&params, &queries, &candidates)?;
        let scale = clip_factor(out.grads.norm(), config.max_grad_norm);
        out.grads.query.scale(scale);
        out.grads.passage.scale(scale);

        for (side, adam) in [(Side::Query, &mut adam_q), (Side::Passage, &mut adam_p)] {
            let g = out.grads.side(side);
            g.scatter_into(&mut dense, buckets);
            adam.step(params.weights_mut(side), &dense, lr);
            g.clear_from(&mut dense, buckets);
        }
        log.push(LossRecord {
            step: log.len(),
            loss: out.loss,
            lr,
        });
        seen += batch.len();
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_defaults() {
        let d = TrainConfig::dpr();
        assert_eq!((d.learn_rate, d.batch_size, d.epochs, d.warmup_instances), (5e-5, 128, 2, 0));
        assert_eq!(d.schedule, Schedule::Linear);
        let r = TrainConfig::rag();
        assert_eq!((r.learn_rate, r.batch_size, r.epochs, r.warmup_instances), (3e-5, 128, 1, 10_000));
        assert_eq!(r.schedule, Schedule::Triangular);
        for c in [d, r] {
            assert_eq!((c.max_grad_norm, c.weight_decay, c.adam_epsilon), (1.0, 0.0, 1e-8));
        }
    }

    #[test]
    fn schedules() {
        let tri = TrainConfig::rag();
        assert!((lr_at(&tri, 5000, 500_000).unwrap() - 1.5e-5).abs() < 1e-18);
        assert_eq!(lr_at(&tri, 10_000, 500_000).unwrap(), 3e-5);
        assert_eq!(lr_at(&tri, 500_000, 500_000).unwrap(), 0.0);
        let lin = TrainConfig::dpr();
        assert_eq!(lr_at(&lin, 0, 100).unwrap(), 5e-5);
        assert_eq!(lr_at(&lin, 100, 100).unwrap(), 0.0);
        assert!((lr_at(&lin, 25, 100).unwrap() - 3.75e-5).abs() < 1e-18);
        assert!(lr_at(&lin, 0, 0).is_err());
        // warmup longer than the run
        assert_eq!(lr_at(&tri, 50, 100).unwrap(), 3e-5 * 50.0 / 100.0);
        assert_eq!(lr_at(&tri, 100, 100).unwrap(), 0.0);
    }

    #[test]
    fn triangular_is_continuous_at_peak() {
        let mut c = TrainConfig::rag();
        c.warmup_instances = 10;
        let before = lr_at(&c, 9, 100).unwrap();
        let peak = lr_at(&c, 10, 100).unwrap();
        let after = lr_at(&c, 11, 100).unwrap();
        assert!(before < peak && after < peak);
    }

    #[test]
    fn batches_cover_instances_each_epoch() {
        let b = epoch_batches(10, 4, 3, 7);
        assert_eq!(b.len(), 3);
        for epoch in &b {
            let mut all: Vec<usize> = epoch.iter().flatten().copied().collect();
            all.sort();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
        assert_eq!(b, epoch_batches(10, 4, 3, 7));
        // a trailing singleton is dropped
        assert_eq!(epoch_batches(9, 4, 1, 0)[0].len(), 2);
    }
}
