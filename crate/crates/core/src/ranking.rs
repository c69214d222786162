use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A scored document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub doc_id: String,
    pub score: f64,
}

/// Documents ordered by descending score, ties broken by ascending doc id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    entries: Vec<RankedDoc>,
}

pub(crate) fn rank_order(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

impl RankedList {
    /// Sort `(doc_id, score)` pairs into ranking order.
    pub fn from_scores<I, S>(scored: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut entries: Vec<RankedDoc> = scored
            .into_iter()
            .map(|(id, score)| RankedDoc {
                doc_id: id.into(),
                score,
            })
            .collect();
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.doc_id.as_str()) {
                return Err(Error::input(format!("duplicate doc_id {:?} in ranking", e.doc_id)));
            }
        }
        entries.sort_by(|a, b| rank_order((&a.doc_id, a.score), (&b.doc_id, b.score)));
        Ok(RankedList { entries })
    }

    pub fn top(mut self, k: usize) -> Self {
        self.entries.truncate(k);
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[RankedDoc] {
        &self.entries
    }

    pub fn doc_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.doc_id.as_str()).collect()
    }

    pub fn score_of(&self, doc_id: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.doc_id == doc_id).map(|e| e.score)
    }

    pub fn position_of(&self, doc_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.doc_id == doc_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &RankedDoc> {
        self.entries.iter()
    }
}
