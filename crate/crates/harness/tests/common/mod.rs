#![allow(dead_code)]

use rico_core::ssm::{ModelConfig, ModelParams};
use rico_core::store::{precompute_states, StateIndex};
use rico_harness::corpus::{gen_corpus, Corpus, CorpusSpec};
use rico_harness::train::{train_lm, TrainConfig};

/// Two entities, two attributes: four facts, two of them queried.
pub fn four_fact_spec() -> CorpusSpec {
    CorpusSpec {
        num_entities: 2,
        num_attributes: 2,
        values_per_attribute: 3,
        num_facts: 4,
        num_queries: 2,
        num_redundancy: 2,
        num_repeat_probes: 1,
        num_landscape_pairs: 1,
        ..CorpusSpec::default()
    }
}

pub fn small_spec() -> CorpusSpec {
    CorpusSpec {
        num_entities: 12,
        num_attributes: 2,
        values_per_attribute: 4,
        num_facts: 20,
        num_queries: 8,
        num_redundancy: 6,
        num_repeat_probes: 3,
        num_landscape_pairs: 3,
        ..CorpusSpec::default()
    }
}

pub fn small_model() -> ModelConfig {
    ModelConfig::new(0, 16, 8, 2)
}

/// A briefly trained small model with its corpus and index.
pub fn small_trained() -> (Corpus, ModelParams<f64>, StateIndex) {
    let corpus = gen_corpus(&small_spec()).unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        ..TrainConfig::default()
    };
    let params = train_lm(&small_model(), &corpus, &cfg).unwrap().params;
    let index = precompute_states(&params, &corpus.document_records().unwrap()).unwrap();
    (corpus, params, index)
}
