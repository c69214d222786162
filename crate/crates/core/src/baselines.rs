//! Reference rankers: lexical BM25, state cosine similarity, and exhaustive
//! per-document loss.

use std::collections::HashMap;

use crate::engine::{CallCounts, LanguageObjective, ObjectiveKind, StateObjective};
use crate::error::{Error, Result};
use crate::ranking::RankedList;
use crate::scalar::Scalar;
use crate::ssm::{forward_scan, ModelParams, StateStack};
use crate::store::StateIndex;

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug)]
struct Bm25Doc {
    doc_id: String,
    len: usize,
    tf: HashMap<String, u32>,
}

/// Okapi BM25 with `IDF = ln(1 + (N − df + 0.5)/(df + 0.5))`.
#[derive(Clone, Debug)]
pub struct Bm25Index {
    docs: Vec<Bm25Doc>,
    df: HashMap<String, u32>,
    avgdl: f64,
    pub k1: f64,
    pub b: f64,
}

impl Bm25Index {
    pub fn build<I, S, D>(docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, D)>,
        S: Into<String>,
        D: AsRef<str>,
    {
        let mut out = Vec::new();
        let mut df: HashMap<String, u32> = HashMap::new();
        for (id, text) in docs {
            let terms = tokenize(text.as_ref());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &terms {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            out.push(Bm25Doc {
                doc_id: id.into(),
                len: terms.len(),
                tf,
            });
        }
        if out.is_empty() {
            return Err(Error::input("BM25 needs at least one document"));
        }
        let avgdl = out.iter().map(|d| d.len as f64).sum::<f64>() / out.len() as f64;
        Ok(Bm25Index {
            docs: out,
            df,
            avgdl,
            k1: 1.2,
            b: 0.75,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Every document scored against `query`; repeated query terms count
    /// once per occurrence.
    pub fn score(&self, query: &str) -> Result<RankedList> {
        let terms = tokenize(query);
        let avgdl = if self.avgdl > 0.0 { self.avgdl } else { 1.0 };
        let scores = self.docs.iter().map(|d| {
            let norm = self.k1 * (1.0 - self.b + self.b * d.len as f64 / avgdl);
            let s = terms
                .iter()
                .map(|t| {
                    let f = d.tf.get(t).copied().unwrap_or(0) as f64;
                    if f == 0.0 {
                        0.0
                    } else {
                        self.idf(t) * f * (self.k1 + 1.0) / (f + norm)
                    }
                })
                .sum::<f64>();
            (d.doc_id.clone(), s)
        });
        RankedList::from_scores(scores)
    }
}

/// Cosine similarity between the query's own final state and every indexed
/// state, each flattened across the retained layers.
pub fn cosine_state_score<T: Scalar>(params: &ModelParams<T>, index: &StateIndex, query: &[u32]) -> Result<RankedList> {
    index.validate_model(params)?;
    if query.is_empty() {
        return Err(Error::input("query must be nonempty"));
    }
    let q: StateStack<T> = forward_scan(params, query, None)?.final_state;
    let qn = index.restrict(&q)?.norm();
    let dots = index.scores(&q)?;
    let scores = index.records().iter().zip(dots).map(|(r, dot)| {
        let dn = r.states.norm();
        let cos = if qn > 0.0 && dn > 0.0 { dot / (qn * dn) } else { 0.0 };
        (r.doc_id.clone(), cos)
    });
    RankedList::from_scores(scores)
}

/// `−L(q | h_d)` for each listed document: one forward pass per document.
pub fn per_doc_loss_score<T: Scalar, S: AsRef<str>>(
    params: &ModelParams<T>,
    index: &StateIndex,
    query: &[u32],
    answer: Option<&[u32]>,
    kind: ObjectiveKind,
    doc_ids: &[S],
) -> Result<(RankedList, CallCounts)> {
    index.validate_model(params)?;
    let objective = LanguageObjective::build(params, kind, query, answer)?;
    let mut scored = Vec::with_capacity(doc_ids.len());
    for id in doc_ids {
        let rec = index
            .get(id.as_ref())
            .ok_or_else(|| Error::input(format!("unknown doc_id {:?}", id.as_ref())))?;
        let state = index.expand(&rec.states.cast::<T>())?;
        scored.push((rec.doc_id.clone(), -objective.loss(&state)?));
    }
    Ok((RankedList::from_scores(scored)?, objective.calls()))
}
