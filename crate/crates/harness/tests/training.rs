mod common;

use common::*;
use rico_core::ssm::write_checkpoint;
use rico_harness::corpus::gen_corpus;
use rico_harness::train::{train_lm, train_lm_with, TrainConfig};
use rico_harness::HarnessError;

#[test]
fn four_fact_corpus_is_memorized() {
    // documents only: question templates are drawn at random, which leaves
    // ln 2 per question that no amount of training removes
    let corpus = gen_corpus(&four_fact_spec()).unwrap();
    let cfg = TrainConfig {
        epochs: 300,
        qa_ratio: 0.0,
        eval_qa_samples: 0,
        ..TrainConfig::default()
    };
    let out = train_lm(&small_model(), &corpus, &cfg).unwrap();
    assert!(out.final_eval.mean <= 0.1, "{:?}", out.final_eval);
    assert_eq!(out.curve.len(), 300);
}

#[test]
fn first_epoch_lowers_the_loss() {
    let corpus = gen_corpus(&small_spec()).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let out = train_lm(&small_model(), &corpus, &cfg).unwrap();
    assert!(
        out.final_eval.mean < out.initial.mean,
        "{:?} vs {:?}",
        out.final_eval,
        out.initial
    );
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let corpus = gen_corpus(&four_fact_spec()).unwrap();
    let cfg = TrainConfig {
        epochs: 15,
        ..TrainConfig::default()
    };
    let a = train_lm(&small_model(), &corpus, &cfg).unwrap();
    let b = train_lm(&small_model(), &corpus, &cfg).unwrap();
    assert_eq!(write_checkpoint(&a.params), write_checkpoint(&b.params));
    let c = train_lm(&small_model(), &corpus, &TrainConfig { seed: 2, ..cfg }).unwrap();
    assert_ne!(write_checkpoint(&a.params), write_checkpoint(&c.params));
}

#[test]
fn vocabulary_size_follows_the_corpus() {
    let corpus = gen_corpus(&four_fact_spec()).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let out = train_lm(&small_model(), &corpus, &cfg).unwrap();
    assert_eq!(out.params.config.vocab_size, corpus.vocab.len());
}

#[test]
fn divergence_is_reported() {
    let corpus = gen_corpus(&four_fact_spec()).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        learning_rate: 1e12,
        grad_clip: 0.0,
        ..TrainConfig::default()
    };
    let mut epochs = 0;
    let err = train_lm_with(&small_model(), &corpus, &cfg, |_| epochs += 1).unwrap_err();
    assert!(matches!(err, HarnessError::Diverged { .. }), "{err}");
    assert!(epochs < 50);
}

#[test]
fn bad_settings_are_rejected() {
    let corpus = gen_corpus(&four_fact_spec()).unwrap();
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            fresh_fraction: 1.5,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(
            train_lm(&small_model(), &corpus, &cfg),
            Err(HarnessError::Config(_))
        ));
    }
}
