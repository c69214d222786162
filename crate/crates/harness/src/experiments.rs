//! Experiment drivers: reranking, loss landscapes, document ordering,
//! scenario studies and the leave-one-out report.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rico_core::baselines::{cosine_state_score, per_doc_loss_score, Bm25Index};
use rico_core::engine::{
    grad_score, mixture_state, optimize_weights, prop1_margin, rerank, warm_start, CallCounts, InitMode,
    MixtureWeights, ObjectiveKind, OptimizationTrace, OptimizerConfig, Prop1Entry,
};
use rico_core::metrics::{answer_loss_delta, evaluate_ranking, mean_by_metric, MetricRow, RelevanceJudgments};
use rico_core::ssm::{sequence_loss, ModelParams};
use rico_core::store::{layer_subsample, StateIndex};
use rico_core::RankedList;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Scenario, ScenarioKind};
use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bm25,
    Cosine,
    PerDocLoss,
    GradUniform,
    GradZero,
    Multistep,
    WarmstartMultistep,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Bm25,
        Method::Cosine,
        Method::PerDocLoss,
        Method::GradUniform,
        Method::GradZero,
        Method::Multistep,
        Method::WarmstartMultistep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bm25 => "bm25",
            Method::Cosine => "cosine",
            Method::PerDocLoss => "per-doc-loss",
            Method::GradUniform => "grad-uniform",
            Method::GradZero => "grad-zero",
            Method::Multistep => "multistep",
            Method::WarmstartMultistep => "warmstart-multistep",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub ks: Vec<usize>,
    pub optimizer: OptimizerConfig,
    /// Layers kept in the index; `None` keeps all.
    pub layer_keep: Option<Vec<usize>>,
    /// Seeds averaged by the random-permutation baseline.
    pub random_seeds: usize,
    pub seed: u64,
    /// Documents concatenated per query in the ordering study.
    pub ordering_docs: usize,
    /// Documents per query in the leave-one-out report.
    pub prop1_docs: usize,
    pub grid_resolution: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Multistep,
            ks: vec![1, 3, 5, 10],
            optimizer: OptimizerConfig::default(),
            layer_keep: None,
            random_seeds: 100,
            seed: 0,
            ordering_docs: 5,
            prop1_docs: 5,
            grid_resolution: 11,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(HarnessError::Config("ks must be nonempty and positive".into()));
        }
        if matches!(&self.layer_keep, Some(k) if k.is_empty()) {
            return Err(HarnessError::Config("layer_keep must be nonempty when given".into()));
        }
        if self.grid_resolution < 2 || self.ordering_docs < 1 || self.prop1_docs < 2 {
            return Err(HarnessError::Config(
                "grid_resolution ≥ 2, ordering_docs ≥ 1 and prop1_docs ≥ 2 are required".into(),
            ));
        }
        self.optimizer.validate()?;
        Ok(())
    }

    /// The index restricted to `layer_keep`, or a copy of it.
    pub fn effective_index(&self, index: &StateIndex) -> Result<StateIndex> {
        Ok(match &self.layer_keep {
            Some(keep) => layer_subsample(index, keep)?,
            None => index.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryRun {
    pub query_id: String,
    pub ranking: RankedList,
    pub calls: CallCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<MixtureWeights>,
    #[serde(skip)]
    pub trace: Option<OptimizationTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerankReport {
    pub method: Method,
    pub runs: Vec<QueryRun>,
    pub rows: Vec<MetricRow>,
    pub calls: CallCounts,
}

impl RerankReport {
    pub fn mean(&self, metric: &str, k: usize) -> Option<f64> {
        mean_by_metric(&self.rows).get(&(metric.to_owned(), k)).copied()
    }

    pub fn means(&self) -> BTreeMap<(String, usize), f64> {
        mean_by_metric(&self.rows)
    }
}

/// BM25 over every corpus document.
pub fn corpus_bm25(corpus: &Corpus) -> Result<Bm25Index> {
    Ok(Bm25Index::build(
        corpus.docs.iter().map(|d| (d.doc_id.clone(), d.text.clone())),
    )?)
}

fn restrict_ranking(full: &RankedList, keep: &[&str]) -> Result<RankedList> {
    Ok(RankedList::from_scores(keep.iter().map(|id| {
        (id.to_string(), full.score_of(id).unwrap_or(f64::NEG_INFINITY))
    }))?)
}

fn add_calls(a: CallCounts, b: CallCounts) -> CallCounts {
    CallCounts {
        forward: a.forward + b.forward,
        backward: a.backward + b.backward,
    }
}

/// Rank one query's judged candidates with `cfg.method`.
pub fn rank_candidates(
    params: &ModelParams<f64>,
    index: &StateIndex,
    bm25: &Bm25Index,
    corpus: &Corpus,
    query_id: &str,
    cfg: &ExperimentConfig,
) -> Result<QueryRun> {
    let query = corpus
        .query(query_id)
        .ok_or_else(|| HarnessError::Config(format!("unknown query {query_id:?}")))?;
    let candidates = corpus.candidates(query_id);
    if candidates.is_empty() {
        return Err(HarnessError::MissingJudgments(query_id.to_owned()));
    }
    let tokens = corpus.encode(&query.question)?;
    let answer = corpus.encode(&query.answer)?;
    let answer = Some(answer.as_slice());
    let kind = cfg.optimizer.objective;
    let sub = index.subset(&candidates)?;
    let none = CallCounts::default();
    let (ranking, calls, weights, trace) = match cfg.method {
        Method::Bm25 => (
            restrict_ranking(&bm25.score(&query.question)?, &candidates)?,
            none,
            None,
            None,
        ),
        Method::Cosine => (cosine_state_score(params, &sub, &tokens)?, none, None, None),
        Method::PerDocLoss => {
            let (r, c) = per_doc_loss_score(params, &sub, &tokens, answer, kind, &candidates)?;
            (r, c, None, None)
        }
        Method::GradUniform | Method::GradZero => {
            let init = if cfg.method == Method::GradUniform {
                InitMode::Uniform
            } else {
                InitMode::Zero
            };
            let s = grad_score(params, &sub, &tokens, answer, kind, &init)?;
            (s.ranking, s.calls, None, None)
        }
        Method::Multistep | Method::WarmstartMultistep => {
            let init = if cfg.method == Method::Multistep {
                MixtureWeights::uniform(&candidates)?
            } else {
                let coarse = restrict_ranking(&bm25.score(&query.question)?, &candidates)?;
                warm_start(&coarse, &candidates)?
            };
            let (w, trace) = optimize_weights(params, &sub, &tokens, answer, &init, &cfg.optimizer)?;
            (rerank(&w)?, trace.calls, Some(w), Some(trace))
        }
    };
    Ok(QueryRun {
        query_id: query_id.to_owned(),
        ranking,
        calls,
        weights,
        trace,
    })
}

pub fn run_rerank_experiment(
    params: &ModelParams<f64>,
    index: &StateIndex,
    corpus: &Corpus,
    cfg: &ExperimentConfig,
) -> Result<RerankReport> {
    cfg.validate()?;
    index.validate_model(params)?;
    let index = cfg.effective_index(index)?;
    let bm25 = corpus_bm25(corpus)?;
    let judgments = corpus.relevance();
    let mut runs = Vec::with_capacity(corpus.queries.len());
    let mut rows = Vec::new();
    let mut calls = CallCounts::default();
    for q in &corpus.queries {
        let run = rank_candidates(params, &index, &bm25, corpus, &q.query_id, cfg)?;
        rows.extend(evaluate_ranking(&run.ranking, &judgments, &q.query_id, &cfg.ks)?);
        calls = add_calls(calls, run.calls);
        runs.push(run);
    }
    Ok(RerankReport {
        method: cfg.method,
        runs,
        rows,
        calls,
    })
}

/// Mean metrics of uniformly random candidate orderings, averaged over
/// `seeds` shuffles per query.
pub fn random_baseline(
    corpus: &Corpus,
    ks: &[usize],
    seeds: usize,
    seed: u64,
) -> Result<BTreeMap<(String, usize), f64>> {
    let judgments = corpus.relevance();
    let mut rows = Vec::new();
    for s in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(s));
        for q in &corpus.queries {
            let mut c = corpus.candidates(&q.query_id);
            if c.is_empty() {
                return Err(HarnessError::MissingJudgments(q.query_id.clone()));
            }
            c.shuffle(&mut rng);
            let n = c.len();
            let ranking = RankedList::from_scores(c.iter().enumerate().map(|(i, d)| (d.to_string(), (n - i) as f64)))?;
            rows.extend(evaluate_ranking(&ranking, &judgments, &q.query_id, ks)?);
        }
    }
    Ok(mean_by_metric(&rows))
}

/// Share of queries whose supporting document holds the largest weight,
/// counting ties at the top (`.0`) and requiring a unique maximum (`.1`).
pub fn support_max_share(corpus: &Corpus, report: &RerankReport) -> (f64, f64) {
    let mut tied = 0usize;
    let mut strict = 0usize;
    let mut total = 0usize;
    for run in &report.runs {
        let (Some(w), Some(q)) = (&run.weights, corpus.query(&run.query_id)) else {
            continue;
        };
        total += 1;
        let support = &q.supporting_doc_ids[0];
        let Some(a) = w.get(support) else { continue };
        let best_other = w
            .doc_ids
            .iter()
            .zip(&w.alpha)
            .filter(|(d, _)| *d != support)
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        if a >= best_other {
            tied += 1;
        }
        if a > best_other {
            strict += 1;
        }
    }
    let frac = |n: usize| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    (frac(tied), frac(strict))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub alpha1: f64,
    pub alpha2: f64,
    pub question_loss: f64,
    pub answer_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landscape {
    pub doc_ids: [String; 2],
    pub cells: Vec<GridCell>,
    pub trajectory: OptimizationTrace,
    /// Forward passes spent on the grid.
    pub grid_forwards: usize,
}

impl Landscape {
    /// Question loss along one axis with the other weight at zero.
    pub fn axis_slice(&self, axis: usize) -> Vec<f64> {
        let mut cells: Vec<&GridCell> = self
            .cells
            .iter()
            .filter(|c| if axis == 0 { c.alpha2 == 0.0 } else { c.alpha1 == 0.0 })
            .collect();
        cells.sort_by(|a, b| {
            let (x, y) = if axis == 0 {
                (a.alpha1, b.alpha1)
            } else {
                (a.alpha2, b.alpha2)
            };
            x.total_cmp(&y)
        });
        cells.iter().map(|c| c.question_loss).collect()
    }
}

/// Falls to its minimum and afterwards rises by at most `tol` times the
/// total drop.
pub fn nonincreasing_then_flat(values: &[f64], tol: f64) -> bool {
    let Some((argmin, &min)) = values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) else {
        return false;
    };
    let drop = values[0] - min;
    let falling = values[..=argmin].windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let flat = values[argmin..].iter().all(|&v| v - min <= tol * drop.max(1e-12));
    falling && flat
}

/// Question and answer loss over an `(α1, α2)` grid on `[0, 1]²`, one
/// forward pass per cell, plus the optimizer trajectory from `start`.
#[allow(clippy::too_many_arguments)]
pub fn run_landscape(
    params: &ModelParams<f64>,
    index: &StateIndex,
    question: &[u32],
    answer: &[u32],
    doc_ids: [&str; 2],
    resolution: usize,
    optimizer: &OptimizerConfig,
    start: [f64; 2],
) -> Result<Landscape> {
    if resolution < 2 {
        return Err(HarnessError::Config("grid resolution must be at least 2".into()));
    }
    index.validate_model(params)?;
    let mut tokens = question.to_vec();
    tokens.extend_from_slice(answer);
    let q_len = question.len();
    let ids = vec![doc_ids[0].to_owned(), doc_ids[1].to_owned()];
    let mut cells = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            let a1 = i as f64 / (resolution - 1) as f64;
            let a2 = j as f64 / (resolution - 1) as f64;
            let h = mixture_state::<f64>(index, &MixtureWeights::new(ids.clone(), vec![a1, a2])?)?;
            let report = sequence_loss(params, &tokens, Some(&h), 1..tokens.len())?;
            let (ql, al) = report.per_token.split_at(q_len - 1);
            cells.push(GridCell {
                alpha1: a1,
                alpha2: a2,
                question_loss: ql.iter().sum(),
                answer_loss: al.iter().sum(),
            });
        }
    }
    let init = MixtureWeights::new(ids.clone(), start.to_vec())?;
    let (_, trajectory) = optimize_weights(params, index, question, Some(answer), &init, optimizer)?;
    Ok(Landscape {
        doc_ids: [ids[0].clone(), ids[1].clone()],
        grid_forwards: cells.len(),
        cells,
        trajectory,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingRow {
    pub query_id: String,
    pub num_docs: usize,
    /// Answer-loss change with the most relevant document closest to the
    /// question.
    pub delta_last: f64,
    pub delta_first: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderingReport {
    pub rows: Vec<OrderingRow>,
    pub mean_last: f64,
    pub mean_first: f64,
}

/// Answer loss relative to the bare question when the graded documents are
/// concatenated most-relevant-last versus most-relevant-first.
pub fn run_ordering_experiment(
    params: &ModelParams<f64>,
    corpus: &Corpus,
    cfg: &ExperimentConfig,
) -> Result<OrderingReport> {
    cfg.validate()?;
    let judgments: RelevanceJudgments = corpus.relevance();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for q in &corpus.queries {
        let judged = judgments.judged(&q.query_id);
        if judged.is_empty() {
            return Err(HarnessError::MissingJudgments(q.query_id.clone()));
        }
        let mut best: Vec<(&str, u32)> = judged.iter().copied().filter(|&(_, g)| g > 0).collect();
        let mut rest: Vec<(&str, u32)> = judged.iter().copied().filter(|&(_, g)| g == 0).collect();
        best.shuffle(&mut rng);
        rest.shuffle(&mut rng);
        let mut chosen: Vec<(&str, u32)> = best.into_iter().chain(rest).take(cfg.ordering_docs).collect();
        // descending grade; stable so equal grades keep their drawn order
        chosen.sort_by_key(|c| std::cmp::Reverse(c.1));
        let docs_first: Vec<Vec<u32>> = chosen
            .iter()
            .map(|(d, _)| corpus.encode(&corpus.doc(d).expect("audited").text))
            .collect::<Result<_>>()?;
        let mut docs_last = docs_first.clone();
        docs_last.reverse();
        let question = corpus.encode(&q.question)?;
        let answer = corpus.encode(&q.answer)?;
        let none: [Vec<u32>; 0] = [];
        rows.push(OrderingRow {
            query_id: q.query_id.clone(),
            num_docs: chosen.len(),
            delta_last: answer_loss_delta(params, &question, &answer, &docs_last, &none)?,
            delta_first: answer_loss_delta(params, &question, &answer, &docs_first, &none)?,
        });
    }
    let mean = |f: fn(&OrderingRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64;
    Ok(OrderingReport {
        mean_last: mean(|r| r.delta_last),
        mean_first: mean(|r| r.delta_first),
        rows,
    })
}

/// One two-document scenario optimized from `α = (½, ½)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario_id: String,
    pub first_doc: String,
    pub second_doc: String,
    pub alpha_first: f64,
    pub alpha_second: f64,
    /// One-step scores `⟨h_i, −∂L/∂h̄⟩` at the start point.
    pub grad_first: f64,
    pub grad_second: f64,
    pub first_wins: bool,
    pub forward_passes: u64,
    pub backward_passes: u64,
}

pub fn run_scenarios(
    params: &ModelParams<f64>,
    index: &StateIndex,
    corpus: &Corpus,
    kind: ScenarioKind,
    optimizer: &OptimizerConfig,
) -> Result<Vec<ScenarioRow>> {
    index.validate_model(params)?;
    corpus
        .scenarios
        .iter()
        .filter(|s| s.kind == kind)
        .map(|s| scenario_row(params, index, corpus, s, optimizer))
        .collect()
}

fn scenario_row(
    params: &ModelParams<f64>,
    index: &StateIndex,
    corpus: &Corpus,
    s: &Scenario,
    optimizer: &OptimizerConfig,
) -> Result<ScenarioRow> {
    let question = corpus.encode(&s.question)?;
    let answer = corpus.encode(&s.answer)?;
    let init = MixtureWeights::uniform(&s.doc_ids)?;
    let sub = index.subset(&s.doc_ids)?;
    let (w, trace) = optimize_weights(params, &sub, &question, Some(&answer), &init, optimizer)?;
    let g = grad_score(
        params,
        &sub,
        &question,
        Some(&answer),
        optimizer.objective,
        &InitMode::Custom(init),
    )?;
    let calls = add_calls(trace.calls, g.calls);
    Ok(ScenarioRow {
        scenario_id: s.scenario_id.clone(),
        first_doc: s.doc_ids[0].clone(),
        second_doc: s.doc_ids[1].clone(),
        alpha_first: w.alpha[0],
        alpha_second: w.alpha[1],
        grad_first: g.ranking.score_of(&s.doc_ids[0]).unwrap_or(f64::NAN),
        grad_second: g.ranking.score_of(&s.doc_ids[1]).unwrap_or(f64::NAN),
        first_wins: w.alpha[0] > w.alpha[1],
        forward_passes: calls.forward,
        backward_passes: calls.backward,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Row {
    pub query_id: String,
    pub template: usize,
    pub doc_id: String,
    pub loo: f64,
    pub bound: f64,
    pub scaled_bound: f64,
    pub slack: f64,
    pub violated: bool,
}

/// Leave-one-out effects against the gradient bound under the real loss,
/// for every query phrased with both question templates.
pub fn run_prop1_report(
    params: &ModelParams<f64>,
    index: &StateIndex,
    corpus: &Corpus,
    cfg: &ExperimentConfig,
) -> Result<Vec<Prop1Row>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37);
    let mut rows = Vec::new();
    for q in &corpus.queries {
        let support = &q.supporting_doc_ids[0];
        let fact = corpus
            .doc(support)
            .and_then(|d| d.fact)
            .ok_or_else(|| HarnessError::Audit(format!("{} has no fact", support)))?;
        let mut others: Vec<&str> = corpus
            .candidates(&q.query_id)
            .into_iter()
            .filter(|d| d != support)
            .collect();
        others.shuffle(&mut rng);
        let mut docs: Vec<&str> = vec![support.as_str()];
        docs.extend(others.into_iter().take(cfg.prop1_docs - 1));
        if docs.len() < 2 {
            continue;
        }
        for template in 0..2 {
            let tokens = corpus.encode(&fact.question_text(&corpus.spec, template))?;
            let entries: Vec<Prop1Entry> = prop1_margin(params, index, &tokens, None, ObjectiveKind::Question, &docs)?;
            rows.extend(entries.into_iter().map(|e| Prop1Row {
                query_id: q.query_id.clone(),
                template,
                violated: e.slack < 0.0,
                doc_id: e.doc_id,
                loo: e.loo,
                bound: e.bound,
                scaled_bound: e.scaled_bound,
                slack: e.slack,
            }));
        }
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Csv {
        path: path.to_owned(),
        source: e,
    })?;
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Csv {
            path: path.to_owned(),
            source: e,
        })?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Top-`k` documents of the whole index for a free-text question. The
/// multistep methods optimize weights over every indexed document;
/// `warmstart-multistep` starts from BM25.
pub fn retrieve(
    params: &ModelParams<f64>,
    index: &StateIndex,
    corpus: &Corpus,
    question: &str,
    method: Method,
    k: usize,
    optimizer: &OptimizerConfig,
) -> Result<QueryRun> {
    index.validate_model(params)?;
    let tokens = corpus.encode(question)?;
    let ids: Vec<&str> = index.doc_ids().collect();
    let kind = optimizer.objective;
    if kind == ObjectiveKind::Oracle {
        return Err(HarnessError::Config(
            "retrieval has no answer; use the question objective".into(),
        ));
    }
    let none = CallCounts::default();
    let bm25 = || -> Result<RankedList> { restrict_ranking(&corpus_bm25(corpus)?.score(question)?, &ids) };
    let (ranking, calls, weights) = match method {
        Method::Bm25 => (bm25()?, none, None),
        Method::Cosine => (cosine_state_score(params, index, &tokens)?, none, None),
        Method::PerDocLoss => {
            let (r, c) = per_doc_loss_score(params, index, &tokens, None, kind, &ids)?;
            (r, c, None)
        }
        Method::GradUniform | Method::GradZero => {
            let init = if method == Method::GradUniform {
                InitMode::Uniform
            } else {
                InitMode::Zero
            };
            let s = grad_score(params, index, &tokens, None, kind, &init)?;
            (s.ranking, s.calls, None)
        }
        Method::Multistep | Method::WarmstartMultistep => {
            let init = if method == Method::Multistep {
                MixtureWeights::uniform(&ids)?
            } else {
                warm_start(&bm25()?, &ids)?
            };
            let (w, trace) = optimize_weights(params, index, &tokens, None, &init, optimizer)?;
            (rerank(&w)?, trace.calls, Some(w))
        }
    };
    Ok(QueryRun {
        query_id: String::new(),
        ranking: ranking.top(k),
        calls,
        weights,
        trace: None,
    })
}
