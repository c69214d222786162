//! Next-token training of the toy model on documents and QA sequences.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rico_core::ssm::{loss_and_param_gradients, sequence_loss, ModelConfig, ModelParams, ParamTensors};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DocSplit, Fact};
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine decay to this fraction of `learning_rate` by the last step.
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// QA sequences per document sequence in each epoch.
    pub qa_ratio: f64,
    /// Share of QA targets drawn as fresh random facts rather than training
    /// documents; fresh facts can only be answered by reading the context.
    pub fresh_fraction: f64,
    /// Share of QA questions that open by restating a training fact about
    /// another entity.
    pub restate_fraction: f64,
    pub max_distractors: usize,
    /// QA sequences in the fixed evaluation sample.
    pub eval_qa_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 600,
            batch_size: 16,
            learning_rate: 1e-2,
            final_lr_fraction: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            qa_ratio: 1.0,
            fresh_fraction: 0.5,
            restate_fraction: 0.25,
            max_distractors: 2,
            eval_qa_samples: 400,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.batch_size == 0 || self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(HarnessError::Config(
                "batch_size and learning_rate must be positive".into(),
            ));
        }
        if !unit(self.fresh_fraction) || !unit(self.restate_fraction) || !unit(self.final_lr_fraction) {
            return Err(HarnessError::Config("fractions must lie in [0, 1]".into()));
        }
        if self.qa_ratio < 0.0 || self.grad_clip < 0.0 || self.weight_decay < 0.0 {
            return Err(HarnessError::Config(
                "qa_ratio, grad_clip and weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// A training sequence and the positions whose next-token loss counts.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSeq {
    pub tokens: Vec<u32>,
    pub span: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub doc_loss: f64,
    pub qa_loss: f64,
    pub tokens: usize,
}

/// Mean per-token loss on the fixed evaluation mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureLoss {
    pub mean: f64,
    pub doc_mean: f64,
    pub qa_mean: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f64>,
    pub initial: MixtureLoss,
    pub curve: Vec<EpochStats>,
    pub final_eval: MixtureLoss,
}

/// Draws QA sequences: context documents in random order, then the
/// question, then the answer. Loss covers the question after its first
/// token plus the answer.
pub struct QaSampler<'a> {
    corpus: &'a Corpus,
    train_facts: Vec<Fact>,
    cfg: &'a TrainConfig,
}

impl<'a> QaSampler<'a> {
    pub fn new(corpus: &'a Corpus, cfg: &'a TrainConfig) -> Self {
        QaSampler {
            corpus,
            train_facts: corpus.facts(DocSplit::Train),
            cfg,
        }
    }

    fn fresh(&self, rng: &mut ChaCha8Rng) -> Fact {
        let s = &self.corpus.spec;
        Fact {
            entity: rng.gen_range(0..s.num_entities),
            attribute: rng.gen_range(0..s.num_attributes),
            value: rng.gen_range(0..s.values_per_attribute),
        }
    }

    fn distractor(&self, rng: &mut ChaCha8Rng, target: &Fact) -> Option<Fact> {
        let s = &self.corpus.spec;
        let mut f = self.fresh(rng);
        if rng.gen_bool(0.5) && s.num_attributes > 1 {
            f.entity = target.entity;
            while f.attribute == target.attribute {
                f.attribute = rng.gen_range(0..s.num_attributes);
            }
        } else if s.num_entities > 1 {
            f.attribute = target.attribute;
            while f.entity == target.entity {
                f.entity = rng.gen_range(0..s.num_entities);
            }
        } else {
            return None;
        }
        Some(f)
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<TrainSeq> {
        let spec = &self.corpus.spec;
        let use_fresh = self.train_facts.is_empty() || rng.gen_bool(self.cfg.fresh_fraction);
        let target = if use_fresh {
            self.fresh(rng)
        } else {
            *self.train_facts.choose(rng).expect("nonempty")
        };
        let mut context = vec![target];
        for _ in 0..rng.gen_range(0..=self.cfg.max_distractors) {
            context.extend(self.distractor(rng, &target));
        }
        let mut prefix = None;
        if rng.gen_bool(self.cfg.restate_fraction) {
            let pool: Vec<&Fact> = self.train_facts.iter().filter(|f| f.entity != target.entity).collect();
            if let Some(&&f) = pool.choose(rng) {
                if rng.gen_bool(0.5) {
                    context.push(f);
                }
                prefix = Some(f);
            }
        }
        context.shuffle(rng);

        let ctx: Vec<String> = context.iter().map(|f| f.doc_text(spec)).collect();
        let mut tokens = self.corpus.encode(&ctx.join(" "))?;
        let ctx_tokens = tokens.len();
        let mut tail: Vec<String> = prefix.iter().map(|f| f.doc_text(spec)).collect();
        tail.push(target.question_text(spec, rng.gen_range(0..2)));
        tail.push(target.answer_text(spec));
        tokens.extend(self.corpus.encode(&tail.join(" "))?);
        Ok(TrainSeq {
            span: ctx_tokens + 1..tokens.len(),
            tokens,
        })
    }
}

/// Training-split documents, loss on every token after the first.
pub fn document_sequences(corpus: &Corpus) -> Result<Vec<TrainSeq>> {
    corpus
        .docs
        .iter()
        .filter(|d| d.split == DocSplit::Train)
        .map(|d| {
            let tokens = corpus.encode(&d.text)?;
            Ok(TrainSeq {
                span: 1..tokens.len(),
                tokens,
            })
        })
        .filter(|s: &Result<TrainSeq>| s.as_ref().map_or(true, |s| s.tokens.len() > 1))
        .collect()
}

fn eval_sample(corpus: &Corpus, cfg: &TrainConfig) -> Result<(Vec<TrainSeq>, Vec<TrainSeq>)> {
    let docs = document_sequences(corpus)?;
    let sampler = QaSampler::new(corpus, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7a1);
    let qa = (0..cfg.eval_qa_samples)
        .map(|_| sampler.sample(&mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((docs, qa))
}

fn mean_loss(params: &ModelParams<f64>, seqs: &[TrainSeq]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut count = 0;
    for s in seqs {
        let r = sequence_loss(params, &s.tokens, None, s.span.clone())?;
        total += r.total;
        count += r.token_count;
    }
    Ok((total, count))
}

/// Per-token loss over every training document and a fixed, seeded sample
/// of QA sequences (the same sample for every call with the same config).
pub fn mixture_loss(params: &ModelParams<f64>, corpus: &Corpus, cfg: &TrainConfig) -> Result<MixtureLoss> {
    let (docs, qa) = eval_sample(corpus, cfg)?;
    let (dl, dn) = mean_loss(params, &docs)?;
    let (ql, qn) = mean_loss(params, &qa)?;
    let per = |l: f64, n: usize| if n == 0 { 0.0 } else { l / n as f64 };
    Ok(MixtureLoss {
        mean: per(dl + ql, dn + qn),
        doc_mean: per(dl, dn),
        qa_mean: per(ql, qn),
    })
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    fn step(&mut self, cfg: &TrainConfig, lr: f64, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let update = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + cfg.epsilon);
            params[i] -= lr * (update + cfg.weight_decay * params[i]);
        }
    }
}

fn diverged(epoch: usize, step: usize, loss: f64) -> HarnessError {
    HarnessError::Diverged { epoch, step, loss }
}

/// Train from seeded initialization. Deterministic in `(model, corpus, cfg)`.
pub fn train_lm(model: &ModelConfig, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_lm_with(model, corpus, cfg, |_| {})
}

/// As [`train_lm`], reporting each finished epoch to `on_epoch`.
pub fn train_lm_with<F: FnMut(&EpochStats)>(
    model: &ModelConfig,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = model.clone();
    model.vocab_size = corpus.vocab.len();
    let mut params = ModelParams::<f64>::init(&model)?;
    let docs = document_sequences(corpus)?;
    if docs.is_empty() {
        return Err(HarnessError::Config("corpus has no training documents".into()));
    }
    let initial = mixture_loss(&params, corpus, cfg)?;
    let sampler = QaSampler::new(corpus, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let qa_per_epoch = (docs.len() as f64 * cfg.qa_ratio).round() as usize;
    let steps_per_epoch = (docs.len() + qa_per_epoch).div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);

    let mut flat = params.tensors.to_flat();
    let mut opt = AdamW {
        m: vec![0.0; flat.len()],
        v: vec![0.0; flat.len()],
        t: 0,
    };
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut batch: Vec<(bool, TrainSeq)> = docs.iter().cloned().map(|s| (true, s)).collect();
        for _ in 0..qa_per_epoch {
            batch.push((false, sampler.sample(&mut rng)?));
        }
        batch.shuffle(&mut rng);
        let (mut doc_sum, mut doc_n, mut qa_sum, mut qa_n) = (0.0, 0usize, 0.0, 0usize);
        for chunk in batch.chunks(cfg.batch_size) {
            let mut grad = ParamTensors::<f64>::zeros(&params.config);
            let mut tokens = 0usize;
            for (is_doc, seq) in chunk {
                let (report, g) =
                    loss_and_param_gradients(&params, &seq.tokens, None, seq.span.clone()).map_err(|e| match e {
                        rico_core::Error::Numeric { .. } => diverged(epoch, step, f64::NAN),
                        other => other.into(),
                    })?;
                if !report.total.is_finite() {
                    return Err(diverged(epoch, step, report.total));
                }
                if *is_doc {
                    doc_sum += report.total;
                    doc_n += report.token_count;
                } else {
                    qa_sum += report.total;
                    qa_n += report.token_count;
                }
                tokens += report.token_count;
                grad.add_scaled(1.0, &g);
            }
            let mut g = grad.to_flat();
            let scale = 1.0 / tokens.max(1) as f64;
            g.iter_mut().for_each(|x| *x *= scale);
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(diverged(epoch, step, norm));
            }
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                let c = cfg.grad_clip / norm;
                g.iter_mut().for_each(|x| *x *= c);
            }
            let progress = step as f64 / total_steps as f64;
            let lr = cfg.learning_rate
                * (cfg.final_lr_fraction
                    + (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            opt.step(cfg, lr, &mut flat, &g);
            params.tensors.assign_flat(&flat)?;
            step += 1;
        }
        let per = |l: f64, n: usize| if n == 0 { 0.0 } else { l / n as f64 };
        let stats = EpochStats {
            epoch,
            mean_loss: per(doc_sum + qa_sum, doc_n + qa_n),
            doc_loss: per(doc_sum, doc_n),
            qa_loss: per(qa_sum, qa_n),
            tokens: doc_n + qa_n,
        };
        on_epoch(&stats);
        curve.push(stats);
    }
    let final_eval = mixture_loss(&params, corpus, cfg)?;
    Ok(TrainOutcome {
        params,
        initial,
        curve,
        final_eval,
    })
}
