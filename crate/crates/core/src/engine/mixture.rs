use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::ssm::StateStack;
use crate::store::StateIndex;

/// Relaxed document weights `α ∈ [0, 1]^k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    pub doc_ids: Vec<String>,
    pub alpha: Vec<f64>,
}

impl MixtureWeights {
    pub fn new(doc_ids: Vec<String>, alpha: Vec<f64>) -> Result<Self> {
        let w = MixtureWeights { doc_ids, alpha };
        w.validate()?;
        Ok(w)
    }

    /// `α_i = 1/N` for every listed document.
    pub fn uniform<S: AsRef<str>>(doc_ids: &[S]) -> Result<Self> {
        let n = doc_ids.len();
        Self::new(
            doc_ids.iter().map(|s| s.as_ref().to_owned()).collect(),
            vec![1.0 / n.max(1) as f64; n],
        )
    }

    pub fn constant<S: AsRef<str>>(doc_ids: &[S], value: f64) -> Result<Self> {
        Self::new(
            doc_ids.iter().map(|s| s.as_ref().to_owned()).collect(),
            vec![value; doc_ids.len()],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.doc_ids.is_empty() {
            return Err(Error::input("mixture needs at least one document"));
        }
        if self.doc_ids.len() != self.alpha.len() {
            return Err(Error::input("doc_ids and alpha differ in length"));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::input(format!("alpha {a} outside [0, 1]")));
        }
        let mut seen = HashSet::with_capacity(self.doc_ids.len());
        if let Some(dup) = self.doc_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::input(format!("duplicate doc_id {dup:?} in mixture")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<f64> {
        self.doc_ids.iter().position(|d| d == doc_id).map(|i| self.alpha[i])
    }
}

/// `h̄(α) = Σ α_i h_{d_i}` over the index's retained layers, placed in a
/// full-depth stack (zero in layers the index does not keep).
pub fn mixture_state<T: Scalar>(index: &StateIndex, weights: &MixtureWeights) -> Result<StateStack<T>> {
    if weights.doc_ids.len() != weights.alpha.len() {
        return Err(Error::input("doc_ids and alpha differ in length"));
    }
    let kept = index.layer_mask().layers();
    let mut acc = StateStack::<T>::zeros(kept.len(), index.state_dim(), index.embed_dim());
    for (id, &a) in weights.doc_ids.iter().zip(&weights.alpha) {
        let rec = index
            .get(id)
            .ok_or_else(|| Error::input(format!("unknown doc_id {id:?}")))?;
        let w = T::from_f64_lossy(a);
        for l in 0..kept.len() {
            let dst = acc.layer_slice_mut(l);
            for (d, &s) in dst.iter_mut().zip(rec.states.layer_slice(l)) {
                *d += w * T::from_f32_exact(s);
            }
        }
    }
    index.expand(&acc)
}

/// `∂L/∂α_i = ⟨h_{d_i}, ∂L/∂h̄⟩` for every document in `weights`.
pub fn alpha_gradient<T: Scalar>(
    index: &StateIndex,
    weights: &MixtureWeights,
    state_grad: &StateStack<T>,
) -> Result<Vec<f64>> {
    let g = index.restrict(state_grad)?;
    weights
        .doc_ids
        .iter()
        .map(|id| {
            let rec = index
                .get(id)
                .ok_or_else(|| Error::input(format!("unknown doc_id {id:?}")))?;
            Ok((0..g.num_layers())
                .map(|l| {
                    rec.states
                        .layer_slice(l)
                        .iter()
                        .zip(g.layer_slice(l))
                        .map(|(&h, &d)| h as f64 * d.as_f64())
                        .sum::<f64>()
                })
                .sum())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{ModelConfig, ModelParams};
    use crate::store::{precompute_states, DocumentRecord};

    fn index() -> StateIndex {
        let p = ModelParams::<f64>::init(&ModelConfig::new(8, 4, 2, 2).with_seed(5)).unwrap();
        precompute_states(
            &p,
            &[
                DocumentRecord::new("x", vec![1, 2, 3]),
                DocumentRecord::new("y", vec![4, 5, 6, 7]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_one_hot_and_mean() {
        let idx = index();
        let z: StateStack<f64> = mixture_state(&idx, &MixtureWeights::constant(&["x", "y"], 0.0).unwrap()).unwrap();
        assert!(z.flatten().iter().all(|&v| v == 0.0));

        let one = MixtureWeights::new(vec!["x".into(), "y".into()], vec![0.0, 1.0]).unwrap();
        let h: StateStack<f64> = mixture_state(&idx, &one).unwrap();
        assert_eq!(h, idx.get("y").unwrap().states.cast::<f64>());

        let half = MixtureWeights::uniform(&["x", "y"]).unwrap();
        let mean: StateStack<f64> = mixture_state(&idx, &half).unwrap();
        let hx = idx.get("x").unwrap().states.flatten();
        let hy = idx.get("y").unwrap().states.flatten();
        for ((m, a), b) in mean.flatten().iter().zip(hx).zip(hy) {
            assert!((m - (a as f64 + b as f64) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_weights() {
        let idx = index();
        assert!(MixtureWeights::new(vec!["x".into()], vec![1.5]).is_err());
        assert!(MixtureWeights::new(vec!["x".into(), "x".into()], vec![0.1, 0.2]).is_err());
        assert!(MixtureWeights::new(vec![], vec![]).is_err());
        let unknown = MixtureWeights::uniform(&["nope"]).unwrap();
        assert!(mixture_state::<f64>(&idx, &unknown).is_err());
    }
}
