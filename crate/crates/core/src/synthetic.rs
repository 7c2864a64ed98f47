//! Generated slot-filling corpus with a known answer for every query.
//!
//! Every entity gets a document whose paragraphs each state one fact,
//! `"{First} {Surname} {relation phrase} {Value}."`. Distractor documents
//! titled "Archive note NNNN" either restate a fact with a wrong value (and
//! repeat the surname, which lifts them above the true fact under BM25) or
//! mention an entity among filler words. For entity `i` the fact for relation
//! `i mod 5` is held out as a dev query; all other facts are training queries.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::kilt::{GoldOutput, GoldRecord, Provenance};
use crate::retriever::render_query;

pub const RELATIONS: [&str; 5] = [
    "place of birth",
    "occupation",
    "employer",
    "spouse",
    "country of citizenship",
];

/// Keeps every fact paragraph in its own passage while fitting distractors.
pub const SYNTHETIC_MAX_PASSAGE_TOKENS: usize = 7;

const RESERVED: [&str; 13] = [
    "place", "of", "birth", "occupation", "employer", "spouse", "country", "citizenship",
    "archive", "note", "sep", "mentioned", "s",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub entities: usize,
    pub distractors: usize,
    /// Share of distractors that restate a fact with a wrong value.
    pub confusable_fraction: f64,
    /// Distinct candidate values per relation.
    pub values_per_relation: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            entities: 200,
            distractors: 2000,
            confusable_fraction: 0.5,
            values_per_relation: 40,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub documents: Vec<Document>,
    pub train: Vec<GoldRecord>,
    pub dev: Vec<GoldRecord>,
}

struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    fn fresh(&mut self) -> String {
        const ONSET: &[u8] = b"bdfgklmnprstvz";
        const VOWEL: &[u8] = b"aeiou";
        const CODA: &[u8] = b"lmnrsx";
        loop {
            let syllables = self.rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(*ONSET.choose(&mut self.rng).unwrap() as char);
                w.push(*VOWEL.choose(&mut self.rng).unwrap() as char);
                if self.rng.gen_bool(0.4) {
                    w.push(*CODA.choose(&mut self.rng).unwrap() as char);
                }
            }
            if !RESERVED.contains(&w.as_str()) && self.used.insert(w.clone()) {
                let mut c = w.chars();
                let first = c.next().unwrap().to_ascii_uppercase();
                return std::iter::once(first).chain(c).collect();
            }
        }
    }
}

fn fact(name: &str, relation: &str, value: &str) -> String {
    format!("{name} {relation} {value}.")
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if config.entities == 0 || config.values_per_relation < 2 {
        return Err(Error::invalid("need at least one entity and two values per relation"));
    }
    if !(0.0..=1.0).contains(&config.confusable_fraction) {
        return Err(Error::invalid("confusable_fraction must lie in [0, 1]"));
    }
    let mut words = Words {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        used: HashSet::new(),
    };
    let first_names: Vec<String> = (0..(config.entities / 5).max(1)).map(|_| words.fresh()).collect();
    let values: Vec<Vec<String>> = RELATIONS
        .iter()
        .map(|_| (0..config.values_per_relation).map(|_| words.fresh()).collect())
        .collect();
    let filler: Vec<String> = (0..60).map(|_| words.fresh().to_lowercase()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    struct Entity {
        id: String,
        name: String,
        surname: String,
        values: Vec<usize>,
    }
    let entities: Vec<Entity> = (0..config.entities)
        .map(|i| {
            let surname = words.fresh();
            let first = first_names.choose(&mut rng).unwrap();
            Entity {
                id: format!("E{i:04}"),
                name: format!("{first} {surname}"),
                surname,
                values: (0..RELATIONS.len())
                    .map(|_| rng.gen_range(0..config.values_per_relation))
                    .collect(),
            }
        })
        .collect();

    let mut documents: Vec<Document> = entities
        .iter()
        .map(|e| Document {
            document_id: e.id.clone(),
            title: e.name.clone(),
            paragraphs: RELATIONS
                .iter()
                .enumerate()
                .map(|(r, rel)| fact(&e.name, rel, &values[r][e.values[r]]))
                .collect(),
        })
        .collect();

    for j in 0..config.distractors {
        let e = entities.choose(&mut rng).unwrap();
        let text = if rng.gen_bool(config.confusable_fraction) {
            let r = rng.gen_range(0..RELATIONS.len());
            let offset = rng.gen_range(1..config.values_per_relation);
            let wrong = &values[r][(e.values[r] + offset) % config.values_per_relation];
            format!("{} {} {wrong}, {}.", e.name, RELATIONS[r], e.surname)
        } else {
            let pick = |rng: &mut ChaCha8Rng| filler.choose(rng).unwrap().clone();
            let (a, b, c) = (pick(&mut rng), pick(&mut rng), pick(&mut rng));
            format!("{a} {b} mentioned {}, {c}.", e.surname)
        };
        documents.push(Document {
            document_id: format!("N{j:04}"),
            title: format!("Archive note {j:04}"),
            paragraphs: vec![text],
        });
    }

    let mut train = Vec::new();
    let mut dev = Vec::new();
    for (i, e) in entities.iter().enumerate() {
        for (r, rel) in RELATIONS.iter().enumerate() {
            let record = GoldRecord {
                id: format!("{}-r{r}", e.id),
                input: render_query(&e.name, rel),
                output: vec![GoldOutput {
                    answer: values[r][e.values[r]].clone(),
                    provenance: vec![Provenance {
                        wikipedia_id: e.id.clone(),
                        start_paragraph_id: Some(r),
                        end_paragraph_id: Some(r),
                    }],
                }],
            };
            if r == i % RELATIONS.len() {
                dev.push(record);
            } else {
                train.push(record);
            }
        }
    }
    Ok(SyntheticCorpus {
        documents,
        train,
        dev,
    })
}
