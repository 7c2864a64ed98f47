//! Copy-scorer generator, retrieval-weighted marginalization and beam search.
//!
//! Each retrieved passage defines a next-token distribution over the passage
//! tokens, the query tokens and EOS, scored log-linearly from five features:
//!
//! ```text
//! φ(w) = [ln(1 + count_passage(w)), ln(1 + count_query(w)),
//!         bigram(last, w) occurs in passage, w == EOS, 1]
//! ```
//!
//! The passage token sequence is followed by an implicit EOS, so the bigram
//! (final passage token, EOS) counts as occurring in the passage.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use crate::binio::{BinReader, BinWriter};
use crate::corpus::tokenize;
use crate::error::{Error, Result};
use crate::retriever::CONTAINER_MAGIC;

/// Reserved end-of-sequence token; never produced by the tokenizer.
pub const EOS: &str = "</s>";
pub const N_FEATURES: usize = 5;
pub const DEFAULT_BEAM: usize = 4;
pub const DEFAULT_MAX_LEN: usize = 16;
pub const DEFAULT_N_RETRIEVE: usize = 20;

const GEN_TAG: &[u8] = b"GEN";

pub type FeatureVec = [f64; N_FEATURES];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeneratorParams {
    pub theta: FeatureVec,
}

impl GeneratorParams {
    pub fn new(theta: FeatureVec) -> Result<Self> {
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("generator weights must be finite"));
        }
        Ok(Self { theta })
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BinWriter::new(w);
        w.bytes(CONTAINER_MAGIC)?;
        self.write_section(&mut w)
    }

    pub(crate) fn write_section<W: Write>(&self, w: &mut BinWriter<W>) -> Result<()> {
        w.bytes(GEN_TAG)?;
        w.u32(1)?;
        w.usize(N_FEATURES)?;
        w.f64s(&self.theta)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BinReader::new(r);
        r.expect_magic(CONTAINER_MAGIC)?;
        let p = Self::read_section(&mut r)?;
        r.finish()?;
        Ok(p)
    }

    pub(crate) fn read_section<R: Read>(r: &mut BinReader<R>) -> Result<Self> {
        r.expect_magic(GEN_TAG)?;
        if r.u32()? != 1 || r.len(N_FEATURES)? != N_FEATURES {
            return Err(Error::Format(format!("generator section must hold {N_FEATURES} weights")));
        }
        let v = r.f64s(N_FEATURES)?;
        Self::new(v.try_into().expect("length checked")).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Probability per token; keys are sorted so iteration is deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenDistribution(pub BTreeMap<String, f64>);

impl TokenDistribution {
    pub fn prob(&self, token: &str) -> f64 {
        self.0.get(token).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Max-subtracted softmax of retrieval scores.
pub fn retrieval_weights(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("retrieval weights need at least one score"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("retrieval scores must be finite"));
    }
    Ok(softmax(scores))
}

pub(crate) fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Precomputed candidate set and features for one (query, passage) pair.
#[derive(Debug, Clone)]
pub struct PassageScorer {
    candidates: Vec<String>,
    /// Features with the bigram slot left at zero.
    base: Vec<FeatureVec>,
    position: HashMap<String, usize>,
    /// Candidate indices that follow a token somewhere in the passage.
    follows: HashMap<String, Vec<usize>>,
}

impl PassageScorer {
    pub fn new(query: &str, passage_text: &str) -> Self {
        let ptoks = tokenize(passage_text);
        let qtoks = tokenize(query);
        let mut pcount: BTreeMap<&str, f64> = BTreeMap::new();
        for t in &ptoks {
            *pcount.entry(t).or_default() += 1.0;
        }
        let mut qcount: BTreeMap<&str, f64> = BTreeMap::new();
        for t in &qtoks {
            *qcount.entry(t).or_default() += 1.0;
        }
        let set: BTreeSet<&str> = ptoks
            .iter()
            .chain(&qtoks)
            .map(String::as_str)
            .chain([EOS])
            .collect();
        let candidates: Vec<String> = set.into_iter().map(str::to_string).collect();
        let position: HashMap<String, usize> = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        let base = candidates
            .iter()
            .map(|c| {
                let c = c.as_str();
                [
                    pcount.get(c).map_or(0.0, |n| n.ln_1p()),
                    qcount.get(c).map_or(0.0, |n| n.ln_1p()),
                    0.0,
                    if c == EOS { 1.0 } else { 0.0 },
                    1.0,
                ]
            })
            .collect();
        let mut follows: HashMap<String, Vec<usize>> = HashMap::new();
        let seq: Vec<&str> = ptoks.iter().map(String::as_str).chain([EOS]).collect();
        for pair in seq.windows(2) {
            let list = follows.entry(pair[0].to_string()).or_default();
            let idx = position[pair[1]];
            if !list.contains(&idx) {
                list.push(idx);
            }
        }
        Self {
            candidates,
            base,
            position,
            follows,
        }
    }

    pub fn candidates(&self) -> &[String] {
        &self.candidates
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.position.get(token).copied()
    }

    /// Feature vectors aligned with [`candidates`](Self::candidates).
    pub fn features(&self, last: Option<&str>) -> Vec<FeatureVec> {
        let mut f = self.base.clone();
        if let Some(next) = last.and_then(|l| self.follows.get(l)) {
            for &i in next {
                f[i][2] = 1.0;
            }
        }
        f
    }

    /// Probabilities aligned with the candidates, plus the features used.
    pub fn probs(&self, params: &GeneratorParams, last: Option<&str>) -> (Vec<f64>, Vec<FeatureVec>) {
        let feats = self.features(last);
        let logits: Vec<f64> = feats
            .iter()
            .map(|f| f.iter().zip(&params.theta).map(|(a, b)| a * b).sum())
            .collect();
        (softmax(&logits), feats)
    }

    pub fn distribution(&self, params: &GeneratorParams, last: Option<&str>) -> TokenDistribution {
        let (p, _) = self.probs(params, last);
        TokenDistribution(self.candidates.iter().cloned().zip(p).collect())
    }
}

/// Per-passage distribution of the token following `prefix`.
pub fn next_token_dist(
    params: &GeneratorParams,
    query: &str,
    passage_text: &str,
    prefix: &[String],
) -> TokenDistribution {
    PassageScorer::new(query, passage_text).distribution(params, prefix.last().map(String::as_str))
}

/// Mixture Σ_z w_z p_z over the union of supports.
pub fn marginal_next_token(weights: &[f64], dists: &[TokenDistribution]) -> Result<TokenDistribution> {
    if weights.is_empty() || weights.len() != dists.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} distributions",
            weights.len(),
            dists.len()
        )));
    }
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for (w, d) in weights.iter().zip(dists) {
        for (tok, p) in d.iter() {
            *out.entry(tok.to_string()).or_default() += w * p;
        }
    }
    Ok(TokenDistribution(out))
}

/// A query paired with its retrieved passages and their weights.
#[derive(Debug, Clone)]
pub struct Mixture {
    scorers: Vec<PassageScorer>,
    weights: Vec<f64>,
}

impl Mixture {
    pub fn new(query: &str, passage_texts: &[&str], weights: &[f64]) -> Result<Self> {
        if passage_texts.is_empty() || passage_texts.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} weights for {} passages",
                weights.len(),
                passage_texts.len()
            )));
        }
        Ok(Self {
            scorers: passage_texts.iter().map(|t| PassageScorer::new(query, t)).collect(),
            weights: weights.to_vec(),
        })
    }

    pub fn scorers(&self) -> &[PassageScorer] {
        &self.scorers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn next_token(&self, params: &GeneratorParams, last: Option<&str>) -> TokenDistribution {
        let dists: Vec<TokenDistribution> =
            self.scorers.iter().map(|s| s.distribution(params, last)).collect();
        marginal_next_token(&self.weights, &dists).expect("lengths match by construction")
    }

    /// Σ_t ln p(y_t | y_<t) under the mixture; `-inf` if any step has zero mass.
    pub fn sequence_log_prob(&self, params: &GeneratorParams, tokens: &[String]) -> f64 {
        let mut total = 0.0;
        let mut last: Option<&str> = None;
        for t in tokens {
            total += self.next_token(params, last).prob(t).ln();
            last = Some(t);
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, EOS excluded.
    pub tokens: Vec<String>,
    /// Includes the EOS step when the hypothesis ended with EOS.
    pub log_prob: f64,
    /// True when generation hit `max_len` without emitting EOS.
    pub truncated: bool,
}

impl Hypothesis {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Token sequence as scored, with EOS when present.
    pub fn full_sequence(&self) -> Vec<String> {
        let mut s = self.tokens.clone();
        if !self.truncated {
            s.push(EOS.to_string());
        }
        s
    }
}

#[derive(Debug, Clone)]
struct Partial {
    seq: Vec<String>,
    score: f64,
}

/// Orders by score descending, then token sequence ascending.
fn better(a: &Partial, b: &Partial) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.seq.cmp(&b.seq))
}

/// Beam search over the mixture's per-step marginal distribution.
///
/// Sequences end at EOS or after `max_len` tokens (EOS included in the count).
/// Because every per-passage distribution depends on the prefix only through
/// its last token, partial hypotheses sharing a last token are recombined
/// (keeping the best), and all hypotheses finishing at one step share a single
/// beam slot. With a beam at least as wide as the candidate vocabulary plus
/// one the search is exact.
pub fn beam_search(
    params: &GeneratorParams,
    mixture: &Mixture,
    beam_size: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam_size == 0 || max_len == 0 {
        return Err(Error::invalid("beam_size and max_len must be >= 1"));
    }
    let mut cache: HashMap<Option<String>, Vec<(String, f64)>> = HashMap::new();
    let mut live = vec![Partial {
        seq: Vec::new(),
        score: 0.0,
    }];
    let mut best: Option<Partial> = None;

    for step in 1..=max_len {
        let mut expansions: Vec<Partial> = Vec::new();
        for h in &live {
            let last = h.seq.last().cloned();
            let logp = cache.entry(last.clone()).or_insert_with(|| {
                mixture
                    .next_token(params, last.as_deref())
                    .iter()
                    .filter(|(_, p)| *p > 0.0)
                    .map(|(t, p)| (t.to_string(), p.ln()))
                    .collect()
            });
            for (tok, lp) in logp.iter() {
                let mut seq = h.seq.clone();
                seq.push(tok.clone());
                expansions.push(Partial {
                    seq,
                    score: h.score + lp,
                });
            }
        }
        expansions.sort_by(better);

        let mut seen_last: BTreeSet<String> = BTreeSet::new();
        let mut finished_slot = false;
        let mut next_live = Vec::new();
        let mut slots = 0;
        for e in expansions {
            if slots == beam_size {
                break;
            }
            let ends = e.seq.last().is_some_and(|t| t == EOS) || step == max_len;
            if ends {
                if finished_slot {
                    continue;
                }
                finished_slot = true;
                if best.as_ref().is_none_or(|b| better(&e, b).is_lt()) {
                    best = Some(e);
                }
            } else {
                if !seen_last.insert(e.seq.last().expect("non-empty").clone()) {
                    continue;
                }
                next_live.push(e);
            }
            slots += 1;
        }
        live = next_live;
        // scores only fall as sequences grow
        let top_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best.as_ref().is_some_and(|b| b.score > top_live) {
            break;
        }
    }

    let best = best.expect("the last step always finishes a hypothesis");
    let truncated = best.seq.last().is_none_or(|t| t != EOS);
    let mut tokens = best.seq;
    if !truncated {
        tokens.pop();
    }
    Ok(Hypothesis {
        tokens,
        log_prob: best.score,
        truncated,
    })
}

/// Picks the single most probable token at every step.
pub fn greedy_decode(params: &GeneratorParams, mixture: &Mixture, max_len: usize) -> Hypothesis {
    let mut tokens: Vec<String> = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let dist = mixture.next_token(params, tokens.last().map(String::as_str));
        let (tok, p) = dist
            .iter()
            .fold(None::<(&str, f64)>, |acc, (t, p)| match acc {
                Some((_, bp)) if bp >= p => acc,
                _ => Some((t, p)),
            })
            .expect("distributions are non-empty");
        log_prob += p.ln();
        if tok == EOS {
            return Hypothesis {
                tokens,
                log_prob,
                truncated: false,
            };
        }
        tokens.push(tok.to_string());
    }
    Hypothesis {
        tokens,
        log_prob,
        truncated: true,
    }
}
