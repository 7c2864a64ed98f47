#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;

use kgi::corpus::{Passage, PassageStore};
use kgi::pipeline::{write_synthetic, Pipeline, PipelineConfig};
use kgi::retriever::SlotQuery;
use kgi::synthetic::SyntheticConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const VOCAB: [&str; 12] = [
    "alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota", "kappa", "lambda", "mu",
];

pub fn random_text(rng: &mut ChaCha8Rng, vocab: usize, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n)
        .map(|_| VOCAB[rng.gen_range(0..vocab)])
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn passage(id: &str, doc: &str, para: usize, text: &str) -> Passage {
    Passage {
        passage_id: id.to_string(),
        document_id: doc.to_string(),
        title: doc.to_string(),
        text: text.to_string(),
        paragraph_range: (para, para),
        truncated: false,
    }
}

/// One passage per document, ids `p000`.. and documents `D000`...
pub fn random_store(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> PassageStore {
    let ps = (0..n)
        .map(|i| passage(&format!("p{i:03}"), &format!("D{i:03}"), 0, &random_text(rng, vocab, 1, 8)))
        .collect();
    PassageStore::new(ps).unwrap()
}

pub fn query(id: &str, head: &str, relation: &str, answers: &[&str], pages: &[&str]) -> SlotQuery {
    SlotQuery {
        id: id.to_string(),
        head_entity: head.to_string(),
        relation: relation.to_string(),
        gold_answers: answers.iter().map(|s| s.to_string()).collect(),
        gold_pages: pages.iter().map(|s| s.to_string()).collect(),
        gold_passages: BTreeSet::new(),
    }
}

/// |a − n| / max(|a|, |n|, 1e-5). With ε = 1e-5 a single ulp of a loss near 10
/// already shows up as ~1e-10 in a central difference, so gradients that are
/// analytically zero need a floor above that noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Writes a synthetic corpus plus config into `dir` and returns a pipeline over it.
pub fn synthetic_pipeline(dir: &Path, synth: &SyntheticConfig) -> Pipeline {
    let config = PipelineConfig::synthetic();
    write_synthetic(dir, synth, &config).unwrap();
    Pipeline::new(config, dir).unwrap()
}

/// Gaussian directions normalized to unit length.
pub fn unit_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            // Box–Muller normals, then normalized
            let v: Vec<f64> = (0..d)
                .map(|_| {
                    let (u1, u2): (f64, f64) = (1.0 - rng.gen::<f64>(), rng.gen());
                    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Every regular file in `dir`, by name.
pub fn snapshot(dir: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

pub fn small_synth() -> SyntheticConfig {
    SyntheticConfig {
        entities: 30,
        distractors: 120,
        ..SyntheticConfig::default()
    }
}

pub mod gradcheck {
    use kgi::corpus::PassageStore;
    use kgi::generator::GeneratorParams;
    use kgi::ragtrain::{sequence_nll, RagState, Retrieved};
    use kgi::retriever::{batch_loss, EncoderParams, Side, TrainingTriple};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{random_store, random_text, rel_err};

    pub const EPS: f64 = 1e-5;
    pub const TOLERANCE: f64 = 1e-4;

    pub fn random_params(rng: &mut ChaCha8Rng, buckets: usize, dim: usize, scale: f64) -> EncoderParams {
        let mut draw = || (0..buckets * dim).map(|_| rng.gen_range(-scale..scale)).collect::<Vec<_>>();
        let q = draw();
        let p = draw();
        EncoderParams::from_parts(buckets, dim, q, p).unwrap()
    }

    pub fn random_batch(rng: &mut ChaCha8Rng, store: &PassageStore, b: usize) -> Vec<TrainingTriple> {
        let ids: Vec<&str> = store.as_slice().iter().map(|p| p.passage_id.as_str()).collect();
        (0..b)
            .map(|_| {
                let pair: Vec<&&str> = ids.choose_multiple(rng, 2).collect();
                TrainingTriple {
                    query_text: random_text(rng, 8, 1, 5),
                    positive_passage_id: pair[0].to_string(),
                    hard_negative_passage_id: pair[1].to_string(),
                }
            })
            .collect()
    }

    /// Central differences over every weight of both encoder matrices against
    /// the analytic in-batch gradient; returns the worst relative error.
    pub fn dpr_max_rel_err(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = random_store(&mut rng, 12, 8);
        let (buckets, dim) = (16, 3);
        let params = random_params(&mut rng, buckets, dim, 0.5);
        let b = rng.gen_range(2..=4);
        let batch = random_batch(&mut rng, &store, b);
        let out = batch_loss(&params, &batch, &store).unwrap();

        let mut worst: f64 = 0.0;
        for side in [Side::Query, Side::Passage] {
            let analytic = out.grads.side(side).to_dense(buckets);
            for i in 0..buckets * dim {
                let mut p = params.clone();
                p.weights_mut(side)[i] += EPS;
                let up = batch_loss(&p, &batch, &store).unwrap().loss;
                p.weights_mut(side)[i] -= 2.0 * EPS;
                let down = batch_loss(&p, &batch, &store).unwrap().loss;
                worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * EPS)));
            }
        }
        worst
    }

    /// Same check for the marginal sequence likelihood: all five generator
    /// weights and every entry of the query matrix.
    pub fn rag_max_rel_err(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (buckets, dim) = (16, 3);
        let n = rng.gen_range(1..=4);
        let texts: Vec<String> = (0..n).map(|_| random_text(&mut rng, 6, 1, 6)).collect();
        let vectors: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let query = random_text(&mut rng, 6, 1, 4);
        let mut pool: Vec<String> = texts.iter().chain([&query]).flat_map(|t| kgi::corpus::tokenize(t)).collect();
        pool.sort();
        pool.dedup();
        let len = rng.gen_range(1..=3);
        let mut target: Vec<String> = (0..len).map(|_| pool.choose(&mut rng).unwrap().clone()).collect();
        target.push(kgi::generator::EOS.to_string());

        let mut theta = [0.0; 5];
        theta.iter_mut().for_each(|t| *t = rng.gen_range(-1.0..1.0));
        let state = RagState {
            generator: GeneratorParams::new(theta).unwrap(),
            encoder: random_params(&mut rng, buckets, dim, 0.5),
        };
        let retrieved: Vec<Retrieved> = texts
            .iter()
            .zip(&vectors)
            .map(|(t, v)| Retrieved { text: t, vector: v })
            .collect();
        let loss = |s: &RagState| sequence_nll(s, &query, &retrieved, &target).unwrap().loss;
        let out = sequence_nll(&state, &query, &retrieved, &target).unwrap();

        let mut worst: f64 = 0.0;
        for k in 0..5 {
            let mut s = state.clone();
            let mut th = theta;
            th[k] += EPS;
            s.generator = GeneratorParams::new(th).unwrap();
            let up = loss(&s);
            th[k] -= 2.0 * EPS;
            s.generator = GeneratorParams::new(th).unwrap();
            let down = loss(&s);
            worst = worst.max(rel_err(out.theta_grad[k], (up - down) / (2.0 * EPS)));
        }
        let analytic = out.query_grad.to_dense(buckets);
        for i in 0..buckets * dim {
            let mut s = state.clone();
            s.encoder.weights_mut(Side::Query)[i] += EPS;
            let up = loss(&s);
            s.encoder.weights_mut(Side::Query)[i] -= 2.0 * EPS;
            let down = loss(&s);
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * EPS)));
        }
        worst
    }
}

pub mod decode {
    use std::collections::BTreeSet;

    use kgi::corpus::tokenize;
    use kgi::generator::{marginal_next_token, next_token_dist, retrieval_weights, GeneratorParams, Mixture, TokenDistribution, EOS};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    /// A random decoding problem whose candidate vocabulary (EOS included) has at most `vocab` tokens.
    pub struct Instance {
        pub theta: GeneratorParams,
        pub query: String,
        pub passages: Vec<String>,
        pub weights: Vec<f64>,
    }

    impl Instance {
        pub fn random(rng: &mut ChaCha8Rng, vocab: usize) -> Self {
            let words = vocab - 1;
            let mut theta = [0.0; 5];
            theta.iter_mut().for_each(|t| *t = rng.gen_range(-3.0..3.0));
            let n = rng.gen_range(1..=3);
            let passages = (0..n).map(|_| super::random_text(rng, words, 1, 6)).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            Self {
                theta: GeneratorParams::new(theta).unwrap(),
                query: super::random_text(rng, words, 1, 3),
                passages,
                weights: retrieval_weights(&scores).unwrap(),
            }
        }

        pub fn mixture(&self) -> Mixture {
            let texts: Vec<&str> = self.passages.iter().map(String::as_str).collect();
            Mixture::new(&self.query, &texts, &self.weights).unwrap()
        }

        /// Per-step marginal built from scratch, without the mixture type.
        pub fn marginal(&self, prefix: &[String]) -> TokenDistribution {
            let dists: Vec<TokenDistribution> = self
                .passages
                .iter()
                .map(|p| next_token_dist(&self.theta, &self.query, p, prefix))
                .collect();
            marginal_next_token(&self.weights, &dists).unwrap()
        }

        pub fn vocabulary(&self) -> Vec<String> {
            let mut v: BTreeSet<String> = self.passages.iter().chain([&self.query]).flat_map(|t| tokenize(t)).collect();
            v.insert(EOS.to_string());
            v.into_iter().collect()
        }

        /// Best complete sequence by enumerating every one: ties go to the
        /// lexicographically smaller token sequence (EOS included).
        pub fn exhaustive(&self, max_len: usize) -> (Vec<String>, f64) {
            let vocab = self.vocabulary();
            let mut best: Option<(Vec<String>, f64)> = None;
            let mut stack: Vec<(Vec<String>, f64)> = vec![(Vec::new(), 0.0)];
            while let Some((seq, score)) = stack.pop() {
                let dist = self.marginal(&seq);
                for tok in &vocab {
                    let p = dist.prob(tok);
                    if p <= 0.0 {
                        continue;
                    }
                    let mut s = seq.clone();
                    s.push(tok.clone());
                    let sc = score + p.ln();
                    if tok == EOS || s.len() == max_len {
                        let wins = match &best {
                            None => true,
                            Some((bs, bsc)) => sc > *bsc || (sc == *bsc && s < *bs),
                        };
                        if wins {
                            best = Some((s, sc));
                        }
                    } else {
                        stack.push((s, sc));
                    }
                }
            }
            best.unwrap()
        }
    }
}

pub mod setup {
    use std::collections::BTreeSet;

    use kgi::annindex::{encode_corpus, HnswIndex};
    use kgi::corpus::{DocumentStore, PassageStore};
    use kgi::lexical::LexicalIndex;
    use kgi::metrics::r_precision;
    use kgi::pipeline::PipelineConfig;
    use kgi::retriever::{build_triples, train_dpr, EncoderParams, Side, SlotQuery};
    use kgi::synthetic::{generate, SyntheticConfig, SYNTHETIC_MAX_PASSAGE_TOKENS};

    pub struct Synthetic {
        pub config: PipelineConfig,
        pub store: PassageStore,
        pub lexical: LexicalIndex,
        pub train: Vec<SlotQuery>,
        pub dev: Vec<SlotQuery>,
    }

    impl Synthetic {
        pub fn new(synth: &SyntheticConfig) -> Self {
            let config = PipelineConfig::synthetic();
            let corpus = generate(synth).unwrap();
            let docs = DocumentStore::from_documents(corpus.documents).unwrap();
            let store = PassageStore::new(docs.segment(SYNTHETIC_MAX_PASSAGE_TOKENS).unwrap()).unwrap();
            let lexical = LexicalIndex::build(store.as_slice(), config.bm25).unwrap();
            let conv = |rs: &[kgi::kilt::GoldRecord]| -> Vec<SlotQuery> {
                rs.iter().map(|r| r.to_slot_query(Some(&store)).unwrap()).collect()
            };
            let (train, dev) = (conv(&corpus.train), conv(&corpus.dev));
            Self {
                config,
                store,
                lexical,
                train,
                dev,
            }
        }

        pub fn initial_encoder(&self) -> EncoderParams {
            let e = self.config.encoder;
            EncoderParams::init(e.buckets, e.dim, e.seed).unwrap()
        }

        pub fn trained_encoder(&self) -> EncoderParams {
            let mined = build_triples(&self.train, &self.lexical, &self.store, self.config.mining.pool_size);
            train_dpr(&self.config.dpr, self.initial_encoder(), &mined.triples, &self.store)
                .unwrap()
                .params
        }

        pub fn index(&self, encoder: &EncoderParams) -> HnswIndex {
            let vectors = encode_corpus(encoder, self.store.as_slice());
            let ids = self.store.as_slice().iter().map(|p| p.passage_id.clone()).collect();
            HnswIndex::build(ids, &vectors, self.config.ann.hnsw()).unwrap()
        }

        /// Mean page-level R-Precision of dense retrieval over the dev queries.
        pub fn dev_r_precision(&self, encoder: &EncoderParams, index: &HnswIndex) -> f64 {
            let n = self.config.decode.n_retrieve;
            let total: f64 = self
                .dev
                .iter()
                .map(|q| {
                    let v = encoder.encode(Side::Query, &q.query_text());
                    let mut seen = BTreeSet::new();
                    let pages: Vec<String> = index
                        .search(&v, n, self.config.ann.ef_search)
                        .unwrap()
                        .into_iter()
                        .map(|(id, _)| self.store.get(&id).unwrap().document_id.clone())
                        .filter(|d| seen.insert(d.clone()))
                        .collect();
                    r_precision(&pages, &q.gold_pages)
                })
                .sum();
            total / self.dev.len() as f64
        }
    }
}

pub mod scoring {
    use std::collections::BTreeSet;
    use std::fs::File;
    use std::io::BufReader;
    use std::path::PathBuf;

    use kgi::kilt::{read_gold, read_predictions};
    use kgi::metrics::{score_dataset, score_instance, Prediction, ScoreReport};
    use kgi::retriever::SlotQuery;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn fixture(name: &str) -> BufReader<File> {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
        BufReader::new(File::open(path).unwrap())
    }

    pub fn load_fixture() -> (Vec<SlotQuery>, Vec<Prediction>) {
        let golds = read_gold(fixture("gold6.jsonl"), "gold6.jsonl")
            .unwrap()
            .iter()
            .map(|r| r.to_slot_query(None).unwrap())
            .collect();
        let preds = read_predictions(fixture("pred6.jsonl"), "pred6.jsonl").unwrap();
        (golds, preds)
    }

    /// Scored by hand: (id, [rprec, recall@5, acc, f1, kilt-ac, kilt-f1]).
    pub const EXPECTED: [(&str, [f64; 6]); 6] = [
        ("m1", [1.0, 1.0, 1.0, 1.0, 1.0, 1.0]),
        // "barack obama" vs "obama": P = 1/2, R = 1
        ("m2", [0.0, 1.0, 0.0, 2.0 / 3.0, 0.0, 0.0]),
        // top-2 is {C, E}: one of two gold pages
        ("m3", [0.5, 1.0, 1.0, 1.0, 0.0, 0.0]),
        // "york" vs "new york city": P = 1, R = 1/3
        ("m4", [1.0, 1.0, 0.0, 0.5, 0.0, 0.5]),
        ("m5", [0.0; 6]),
        // gold page sits at rank 6
        ("m6", [0.0, 0.0, 1.0, 1.0, 0.0, 0.0]),
    ];

    pub const EXPECTED_MEANS: [f64; 6] = [2.5 / 6.0, 4.0 / 6.0, 0.5, 25.0 / 36.0, 1.0 / 6.0, 0.25];

    pub fn columns(r: &ScoreReport) -> [f64; 6] {
        [r.r_precision, r.recall_at_5, r.accuracy, r.f1, r.kilt_ac, r.kilt_f1]
    }

    /// Compares the fixture against the hand scores; returns the first mismatch.
    pub fn check_fixture(tol: f64) -> Result<(), String> {
        let (golds, preds) = load_fixture();
        for (id, want) in EXPECTED {
            let g = golds.iter().find(|g| g.id == id).ok_or(format!("gold {id} missing"))?;
            let p = preds.iter().find(|p| p.query_id == id).ok_or(format!("prediction {id} missing"))?;
            let s = score_instance(g, p);
            let got = [s.r_precision, s.recall_at_5, s.accuracy, s.f1, s.kilt_ac, s.kilt_f1];
            if got.iter().zip(&want).any(|(a, b)| (a - b).abs() > tol) {
                return Err(format!("{id}: got {got:?}, want {want:?}"));
            }
        }
        let report = score_dataset(&golds, &preds).map_err(|e| e.to_string())?;
        let got = columns(&report);
        if report.n != 6 || got.iter().zip(&EXPECTED_MEANS).any(|(a, b)| (a - b).abs() > tol) {
            return Err(format!("report {got:?}, want {EXPECTED_MEANS:?}"));
        }
        Ok(())
    }

    const PAGES: [&str; 8] = ["A", "B", "C", "D", "E", "F", "G", "H"];
    const WORDS: [&str; 6] = ["red", "the", "new", "york", "paris", "1961"];

    fn answer(rng: &mut ChaCha8Rng) -> String {
        let n = rng.gen_range(0..=3);
        (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
    }

    /// Random gold/prediction pairs over a tiny vocabulary so exact matches,
    /// partial overlaps and perfect provenance all occur often.
    pub fn fuzz_case(rng: &mut ChaCha8Rng, n: usize) -> (Vec<SlotQuery>, Vec<Prediction>) {
        let mut golds = Vec::with_capacity(n);
        let mut preds = Vec::with_capacity(n);
        for i in 0..n {
            let id = format!("q{i}");
            let k = rng.gen_range(1..=3);
            let gold_pages: BTreeSet<String> = PAGES.choose_multiple(rng, k).map(|s| s.to_string()).collect();
            let answers = (0..rng.gen_range(1..=2)).map(|_| answer(rng)).collect();
            golds.push(SlotQuery {
                id: id.clone(),
                head_entity: "h".into(),
                relation: "r".into(),
                gold_answers: answers,
                gold_pages,
                gold_passages: BTreeSet::new(),
            });
            let m = rng.gen_range(0..=PAGES.len());
            let mut ranked: Vec<String> = PAGES.iter().map(|s| s.to_string()).collect();
            ranked.shuffle(rng);
            ranked.truncate(m);
            preds.push(Prediction::new(id, answer(rng), ranked, 0.0));
        }
        (golds, preds)
    }

    /// The ordering guarantees between the six columns, plus invariance of
    /// the report under shuffling both lists.
    pub fn check_inequalities(rng: &mut ChaCha8Rng, golds: &[SlotQuery], preds: &[Prediction]) -> Result<(), String> {
        let report = score_dataset(golds, preds).map_err(|e| e.to_string())?;
        let eps = 1e-12;
        if report.kilt_ac > report.accuracy + eps || report.kilt_f1 > report.f1 + eps {
            return Err(format!("gated score above ungated: {report:?}"));
        }
        let mut perfect = 0;
        for (g, p) in golds.iter().zip(preds) {
            let s = score_instance(g, p);
            if s.accuracy > s.f1 {
                return Err(format!("{}: accuracy {} above f1 {}", g.id, s.accuracy, s.f1));
            }
            if s.r_precision == 1.0 {
                perfect += 1;
            }
        }
        if report.kilt_ac > perfect as f64 / golds.len() as f64 + eps {
            return Err(format!("kilt-ac {} above perfect-provenance share", report.kilt_ac));
        }
        if columns(&report).iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(format!("out of range: {report:?}"));
        }
        let (mut g2, mut p2) = (golds.to_vec(), preds.to_vec());
        g2.shuffle(rng);
        p2.shuffle(rng);
        let again = score_dataset(&g2, &p2).map_err(|e| e.to_string())?;
        if columns(&again).iter().zip(columns(&report)).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err("report changed under reordering".into());
        }
        Ok(())
    }
}
