use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::RankedList;
use crate::scalar::Scalar;
use crate::ssm::{forward_scan, ModelParams, StateStack};

/// A tokenized document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub token_ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_text: Option<String>,
}

impl DocumentRecord {
    pub fn new(doc_id: impl Into<String>, token_ids: Vec<u32>) -> Self {
        DocumentRecord {
            doc_id: doc_id.into(),
            token_ids,
            source_text: None,
        }
    }
}

/// A document's final state, restricted to the index's retained layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentStateRecord {
    pub doc_id: String,
    pub token_count: u32,
    pub states: StateStack<f32>,
}

/// Which of the model's layers an index keeps. Bit `l` lives in byte
/// `l / 8` at position `l % 8`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMask {
    num_layers: usize,
    bits: Vec<u8>,
}

impl LayerMask {
    pub fn all(num_layers: usize) -> Self {
        Self::from_layers(num_layers, &(0..num_layers).collect::<Vec<_>>()).expect("all layers are in range")
    }

    pub fn from_layers(num_layers: usize, keep: &[usize]) -> Result<Self> {
        let mut bits = vec![0u8; num_layers.div_ceil(8)];
        for &l in keep {
            if l >= num_layers {
                return Err(Error::input(format!("layer {l} out of range for {num_layers} layers")));
            }
            bits[l / 8] |= 1 << (l % 8);
        }
        Ok(LayerMask { num_layers, bits })
    }

    pub fn from_bytes(num_layers: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != num_layers.div_ceil(8) {
            return Err(Error::Format("layer mask length mismatch".into()));
        }
        let mask = LayerMask { num_layers, bits };
        // no bits past num_layers
        if (num_layers..mask.bits.len() * 8).any(|l| mask.bits[l / 8] & (1 << (l % 8)) != 0) {
            return Err(Error::Format("layer mask has bits past the layer count".into()));
        }
        Ok(mask)
    }

    pub fn contains(&self, layer: usize) -> bool {
        layer < self.num_layers && self.bits[layer / 8] & (1 << (layer % 8)) != 0
    }

    /// Retained layer indices in ascending order.
    pub fn layers(&self) -> Vec<usize> {
        (0..self.num_layers).filter(|&l| self.contains(l)).collect()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }
}

/// Document states sharing one model fingerprint and one layer mask.
#[derive(Clone, Debug, PartialEq)]
pub struct StateIndex {
    pub(crate) fingerprint: [u8; 32],
    pub(crate) state_dim: usize,
    pub(crate) embed_dim: usize,
    pub(crate) layer_mask: LayerMask,
    pub(crate) records: Vec<DocumentStateRecord>,
    pub(crate) lookup: HashMap<String, usize>,
}

impl StateIndex {
    pub(crate) fn from_parts(
        fingerprint: [u8; 32],
        state_dim: usize,
        embed_dim: usize,
        layer_mask: LayerMask,
        records: Vec<DocumentStateRecord>,
    ) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(records.len());
        let kept = layer_mask.count();
        for (i, r) in records.iter().enumerate() {
            if r.doc_id.is_empty() {
                return Err(Error::input("doc_id must be nonempty"));
            }
            if lookup.insert(r.doc_id.clone(), i).is_some() {
                return Err(Error::input(format!("duplicate doc_id {:?}", r.doc_id)));
            }
            if r.states.num_layers() != kept || (kept > 0 && r.states.layer_shape() != (state_dim, embed_dim)) {
                return Err(Error::input(format!(
                    "record {:?} does not match the index layer layout",
                    r.doc_id
                )));
            }
        }
        Ok(StateIndex {
            fingerprint,
            state_dim,
            embed_dim,
            layer_mask,
            records,
            lookup,
        })
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn layer_mask(&self) -> &LayerMask {
        &self.layer_mask
    }

    pub fn num_layers(&self) -> usize {
        self.layer_mask.num_layers()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[DocumentStateRecord] {
        &self.records
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.doc_id.as_str())
    }

    pub fn get(&self, doc_id: &str) -> Option<&DocumentStateRecord> {
        self.lookup.get(doc_id).map(|&i| &self.records[i])
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.lookup.get(doc_id).copied()
    }

    /// New index holding the listed documents, in the listed order.
    pub fn subset<S: AsRef<str>>(&self, doc_ids: &[S]) -> Result<Self> {
        let records = doc_ids
            .iter()
            .map(|id| {
                self.get(id.as_ref())
                    .cloned()
                    .ok_or_else(|| Error::input(format!("unknown doc_id {:?}", id.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(
            self.fingerprint,
            self.state_dim,
            self.embed_dim,
            self.layer_mask.clone(),
            records,
        )
    }

    /// Fails unless the index was built by `params`.
    pub fn validate_model<T: Scalar>(&self, params: &ModelParams<T>) -> Result<()> {
        if params.fingerprint() != self.fingerprint {
            return Err(Error::Fingerprint);
        }
        Ok(())
    }

    /// Place retained-layer states into a full-depth stack, zero elsewhere.
    pub fn expand<T: Scalar>(&self, retained: &StateStack<T>) -> Result<StateStack<T>> {
        let kept = self.layer_mask.layers();
        if retained.num_layers() != kept.len() {
            return Err(Error::input("state does not match the index layer mask"));
        }
        let mut full = StateStack::zeros(self.num_layers(), self.state_dim, self.embed_dim);
        for (src, &dst) in kept.iter().enumerate() {
            full.layer_mut(dst).assign(retained.layer(src));
        }
        Ok(full)
    }

    /// Project a full-depth stack (or one already restricted to the mask)
    /// onto the retained layers.
    pub fn restrict<T: Scalar>(&self, stack: &StateStack<T>) -> Result<StateStack<T>> {
        let kept = self.layer_mask.layers();
        if stack.num_layers() == self.num_layers() {
            stack.select_layers(&kept)
        } else if stack.num_layers() == kept.len() {
            Ok(stack.clone())
        } else {
            Err(Error::input(format!(
                "direction has {} layers; index keeps {} of {}",
                stack.num_layers(),
                kept.len(),
                self.num_layers()
            )))
        }
    }

    /// Frobenius score of every document against `direction`, in index order.
    pub fn scores<T: Scalar>(&self, direction: &StateStack<T>) -> Result<Vec<f64>> {
        let dir = self.restrict(direction)?;
        if dir.num_layers() > 0 && dir.layer_shape() != (self.state_dim, self.embed_dim) {
            return Err(Error::input("direction layer shape does not match the index"));
        }
        Ok(self
            .records
            .iter()
            .map(|r| {
                (0..dir.num_layers())
                    .map(|l| {
                        r.states
                            .layer_slice(l)
                            .iter()
                            .zip(dir.layer_slice(l))
                            .map(|(&a, &b)| a as f64 * b.as_f64())
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect())
    }

    /// Payload size in bytes when serialized.
    pub fn serialized_len(&self) -> usize {
        super::format::serialized_len(self)
    }
}

/// Final state of every document from a zero initial state.
pub fn precompute_states<T: Scalar>(params: &ModelParams<T>, docs: &[DocumentRecord]) -> Result<StateIndex> {
    if docs.is_empty() {
        return Err(Error::input("no documents to index"));
    }
    let cfg = &params.config;
    let mut records = Vec::with_capacity(docs.len());
    for doc in docs {
        if doc.token_ids.is_empty() {
            return Err(Error::input(format!("document {:?} has no tokens", doc.doc_id)));
        }
        let out = forward_scan(params, &doc.token_ids, None)?;
        records.push(DocumentStateRecord {
            doc_id: doc.doc_id.clone(),
            token_count: doc.token_ids.len() as u32,
            states: out.final_state.cast(),
        });
    }
    StateIndex::from_parts(
        params.fingerprint(),
        cfg.state_dim,
        cfg.embed_dim,
        LayerMask::all(cfg.num_layers),
        records,
    )
}

/// Contiguous block of `size` layers centered on `num_layers / 2`.
pub fn middle_layers(num_layers: usize, size: Option<usize>) -> Vec<usize> {
    let size = size
        .unwrap_or_else(|| num_layers.div_ceil(6))
        .clamp(1, num_layers.max(1));
    let start = (num_layers / 2).saturating_sub(size / 2).min(num_layers - size);
    (start..start + size).collect()
}

/// Keep only the listed layers in every record.
pub fn layer_subsample(index: &StateIndex, keep: &[usize]) -> Result<StateIndex> {
    if keep.is_empty() {
        return Err(Error::input("layer keep-set is empty"));
    }
    let mut keep = keep.to_vec();
    keep.sort_unstable();
    keep.dedup();
    for &l in &keep {
        if !index.layer_mask.contains(l) {
            return Err(Error::input(format!("layer {l} is not retained by the index")));
        }
    }
    let current = index.layer_mask.layers();
    let positions: Vec<usize> = keep
        .iter()
        .map(|l| current.iter().position(|c| c == l).expect("checked above"))
        .collect();
    let records = index
        .records
        .iter()
        .map(|r| {
            Ok(DocumentStateRecord {
                doc_id: r.doc_id.clone(),
                token_count: r.token_count,
                states: r.states.select_layers(&positions)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    StateIndex::from_parts(
        index.fingerprint,
        index.state_dim,
        index.embed_dim,
        LayerMask::from_layers(index.num_layers(), &keep)?,
        records,
    )
}

/// The `k` documents with the largest inner product against `direction`.
pub fn topk_inner_product<T: Scalar>(index: &StateIndex, direction: &StateStack<T>, k: usize) -> Result<RankedList> {
    if k == 0 || k > index.len() {
        return Err(Error::input(format!("k must be in 1..={}, got {k}", index.len())));
    }
    let scores = index.scores(direction)?;
    Ok(RankedList::from_scores(index.doc_ids().zip(scores))?.top(k))
}
