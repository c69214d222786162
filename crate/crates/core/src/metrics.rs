//! Ranking metrics over graded relevance judgments and answer-loss deltas.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::RankedList;
use crate::scalar::Scalar;
use crate::ssm::{sequence_loss, ModelParams};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub query_id: String,
    pub doc_id: String,
    pub grade: u32,
}

/// Graded relevance per query. Unjudged documents have grade 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelevanceJudgments {
    by_query: BTreeMap<String, HashMap<String, u32>>,
}

impl RelevanceJudgments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, j: Judgment) {
        self.by_query.entry(j.query_id).or_default().insert(j.doc_id, j.grade);
    }

    pub fn from_judgments<I: IntoIterator<Item = Judgment>>(items: I) -> Self {
        let mut out = Self::new();
        for j in items {
            out.insert(j);
        }
        out
    }

    /// One `{query_id, doc_id, grade}` object per line; blank lines skipped.
    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut out = Self::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Format(format!("judgments line {}: {e}", n + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let j: Judgment =
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("judgments line {}: {e}", n + 1)))?;
            out.insert(j);
        }
        Ok(out)
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.by_query
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.by_query.keys().map(String::as_str)
    }

    /// Judged documents of a query in ascending id order.
    pub fn judged(&self, query_id: &str) -> Vec<(&str, u32)> {
        let mut v: Vec<(&str, u32)> = self
            .by_query
            .get(query_id)
            .map(|m| m.iter().map(|(d, &g)| (d.as_str(), g)).collect())
            .unwrap_or_default();
        v.sort_unstable();
        v
    }

    pub fn num_relevant(&self, query_id: &str) -> usize {
        self.by_query
            .get(query_id)
            .map(|m| m.values().filter(|&&g| g > 0).count())
            .unwrap_or(0)
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::input("k must be positive"));
    }
    Ok(())
}

/// `(P@k, R@k)`; recall is 0 when the query has no relevant document.
pub fn precision_recall_at_k(
    ranking: &RankedList,
    judgments: &RelevanceJudgments,
    query_id: &str,
    k: usize,
) -> Result<(f64, f64)> {
    check_k(k)?;
    let hits = ranking
        .iter()
        .take(k)
        .filter(|d| judgments.grade(query_id, &d.doc_id) > 0)
        .count() as f64;
    let total = judgments.num_relevant(query_id);
    let recall = if total == 0 { 0.0 } else { hits / total as f64 };
    Ok((hits / k as f64, recall))
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32)
}

fn discount(rank0: usize) -> f64 {
    1.0 / ((rank0 + 2) as f64).log2()
}

/// nDCG@k with gain `2^rel` and discount `1/log2(i+1)`. The ideal list is
/// built from the grades of every ranked document together with every judged
/// document of the query, sorted descending.
pub fn ndcg_at_k(ranking: &RankedList, judgments: &RelevanceJudgments, query_id: &str, k: usize) -> Result<f64> {
    check_k(k)?;
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(judgments.grade(query_id, &d.doc_id)) * discount(i))
        .sum();
    let mut pool: HashMap<&str, u32> = ranking
        .iter()
        .map(|d| (d.doc_id.as_str(), judgments.grade(query_id, &d.doc_id)))
        .collect();
    for (d, g) in judgments.judged(query_id) {
        pool.insert(d, g);
    }
    let mut grades: Vec<u32> = pool.into_values().collect();
    grades.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) * discount(i))
        .sum();
    Ok(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

/// Average precision over the top `k`, normalized by `min(R, k)`.
pub fn map_at_k(ranking: &RankedList, judgments: &RelevanceJudgments, query_id: &str, k: usize) -> Result<f64> {
    check_k(k)?;
    let total = judgments.num_relevant(query_id);
    if total == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in ranking.iter().take(k).enumerate() {
        if judgments.grade(query_id, &d.doc_id) > 0 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / total.min(k) as f64)
}

/// One `(query, metric, k)` measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub query_id: String,
    pub metric: String,
    pub k: usize,
    pub value: f64,
}

/// P@k, R@k, nDCG@k and MAP@k for each `k`.
pub fn evaluate_ranking(
    ranking: &RankedList,
    judgments: &RelevanceJudgments,
    query_id: &str,
    ks: &[usize],
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::with_capacity(ks.len() * 4);
    for &k in ks {
        let (p, r) = precision_recall_at_k(ranking, judgments, query_id, k)?;
        let values = [
            ("precision", p),
            ("recall", r),
            ("ndcg", ndcg_at_k(ranking, judgments, query_id, k)?),
            ("map", map_at_k(ranking, judgments, query_id, k)?),
        ];
        rows.extend(values.into_iter().map(|(metric, value)| MetricRow {
            query_id: query_id.to_owned(),
            metric: metric.to_owned(),
            k,
            value,
        }));
    }
    Ok(rows)
}

/// Mean value per `(metric, k)` across queries.
pub fn mean_by_metric(rows: &[MetricRow]) -> BTreeMap<(String, usize), f64> {
    let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.metric.clone(), r.k)).or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter().map(|(key, (s, n))| (key, s / n as f64)).collect()
}

/// Documents concatenated in order, followed by the query.
pub fn build_prompt<D: AsRef<[u32]>>(docs: &[D], query: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = docs.iter().flat_map(|d| d.as_ref().iter().copied()).collect();
    out.extend_from_slice(query);
    out
}

/// Mean per-token loss of `answer` after `prompt`.
pub fn answer_loss<T: Scalar>(params: &ModelParams<T>, prompt: &[u32], answer: &[u32]) -> Result<f64> {
    if prompt.is_empty() || answer.is_empty() {
        return Err(Error::input("prompt and answer must be nonempty"));
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(answer);
    Ok(sequence_loss(params, &tokens, None, prompt.len()..tokens.len())?.mean())
}

/// Answer loss with `retrieved` as the prompt context minus the loss with
/// `reference` as context. Negative means the retrieved set helps more.
pub fn answer_loss_delta<T: Scalar, D: AsRef<[u32]>, E: AsRef<[u32]>>(
    params: &ModelParams<T>,
    query: &[u32],
    answer: &[u32],
    retrieved: &[D],
    reference: &[E],
) -> Result<f64> {
    let a = answer_loss(params, &build_prompt(retrieved, query), answer)?;
    let b = answer_loss(params, &build_prompt(reference, query), answer)?;
    Ok(a - b)
}
