use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::ssm::{decomposed_output, loss_and_state_gradient, sequence_loss, ModelParams, StateStack};

/// Which tokens the language-model objective scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Self-supervised loss on the query tokens after the first.
    #[default]
    Question,
    /// Loss on gold answer tokens appended to the query.
    Oracle,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub forward: u64,
    pub backward: u64,
}

/// Forward/backward pass counters shared by every objective.
#[derive(Debug, Default)]
pub struct ModelCalls {
    forward: AtomicU64,
    backward: AtomicU64,
}

impl ModelCalls {
    pub fn record_forward(&self) {
        self.forward.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_backward(&self) {
        self.backward.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CallCounts {
        CallCounts {
            forward: self.forward.load(Ordering::Relaxed),
            backward: self.backward.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.forward.store(0, Ordering::Relaxed);
        self.backward.store(0, Ordering::Relaxed);
    }
}

/// A loss on the injected initial state. Implementations count one forward
/// pass per evaluation and one backward pass per gradient.
pub trait StateObjective<T: Scalar> {
    fn loss(&self, state: &StateStack<T>) -> Result<f64>;
    fn loss_and_gradient(&self, state: &StateStack<T>) -> Result<(f64, StateStack<T>)>;
    fn calls(&self) -> CallCounts;
}

/// Summed cross-entropy of a token span under the model.
pub struct LanguageObjective<'a, T> {
    params: &'a ModelParams<T>,
    tokens: Vec<u32>,
    span: Range<usize>,
    calls: ModelCalls,
}

impl<'a, T: Scalar> LanguageObjective<'a, T> {
    pub fn question(params: &'a ModelParams<T>, query: &[u32]) -> Result<Self> {
        if query.len() < 2 {
            return Err(Error::input("question objective needs at least two query tokens"));
        }
        Self::new(params, query.to_vec(), 1..query.len())
    }

    pub fn oracle(params: &'a ModelParams<T>, query: &[u32], answer: &[u32]) -> Result<Self> {
        if query.is_empty() || answer.is_empty() {
            return Err(Error::input("oracle objective needs a query and an answer"));
        }
        let mut tokens = query.to_vec();
        tokens.extend_from_slice(answer);
        Self::new(params, tokens, query.len()..query.len() + answer.len())
    }

    pub fn build(
        params: &'a ModelParams<T>,
        kind: ObjectiveKind,
        query: &[u32],
        answer: Option<&[u32]>,
    ) -> Result<Self> {
        match kind {
            ObjectiveKind::Question => Self::question(params, query),
            ObjectiveKind::Oracle => {
                let answer = answer.ok_or_else(|| Error::input("oracle objective requires an answer"))?;
                Self::oracle(params, query, answer)
            }
        }
    }

    pub fn new(params: &'a ModelParams<T>, tokens: Vec<u32>, span: Range<usize>) -> Result<Self> {
        params.check_tokens(&tokens)?;
        if span.start < 1 || span.end > tokens.len() || span.is_empty() {
            return Err(Error::input(format!(
                "span {span:?} invalid for {} tokens",
                tokens.len()
            )));
        }
        Ok(LanguageObjective {
            params,
            tokens,
            span,
            calls: ModelCalls::default(),
        })
    }

    pub fn params(&self) -> &ModelParams<T> {
        self.params
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn span(&self) -> Range<usize> {
        self.span.clone()
    }
}

impl<T: Scalar> StateObjective<T> for LanguageObjective<'_, T> {
    fn loss(&self, state: &StateStack<T>) -> Result<f64> {
        self.calls.record_forward();
        Ok(sequence_loss(self.params, &self.tokens, Some(state), self.span.clone())?.total)
    }

    fn loss_and_gradient(&self, state: &StateStack<T>) -> Result<(f64, StateStack<T>)> {
        self.calls.record_forward();
        self.calls.record_backward();
        let (report, grad) = loss_and_state_gradient(self.params, &self.tokens, Some(state), self.span.clone())?;
        Ok((report.total, grad))
    }

    fn calls(&self) -> CallCounts {
        self.calls.snapshot()
    }
}

/// `½ Σ_l ‖A_l vec(h_l) − b_l‖²`, convex in the state and hence in the
/// mixture weights. `vec` is row-major over the `n × m` layer state.
pub struct SquaredErrorSurrogate<T> {
    shape: (usize, usize, usize),
    terms: Vec<(usize, Array2<T>, Array1<T>)>,
    calls: ModelCalls,
}

impl<T: Scalar> SquaredErrorSurrogate<T> {
    /// `shape` is `(layers, n, m)`; each term is `(layer, A, b)`.
    pub fn new(shape: (usize, usize, usize), terms: Vec<(usize, Array2<T>, Array1<T>)>) -> Result<Self> {
        let (layers, n, m) = shape;
        for (l, a, b) in &terms {
            if *l >= layers {
                return Err(Error::input(format!("term layer {l} out of range")));
            }
            if a.ncols() != n * m || a.nrows() != b.len() {
                return Err(Error::input("term matrix shape mismatch"));
            }
        }
        Ok(SquaredErrorSurrogate {
            shape,
            terms,
            calls: ModelCalls::default(),
        })
    }

    /// Regress the first layer's query readouts onto `target` (`len_q × m`).
    /// The first layer's readouts are affine in its initial state
    /// (`Y = H_q vec(h) + M_q X_q`), so the surrogate is exactly quadratic.
    pub fn first_layer_readouts(params: &ModelParams<T>, query: &[u32], target: &Array2<T>) -> Result<Self> {
        let cfg = &params.config;
        let dec = decomposed_output(params, &[], query)?;
        let layer0 = &dec.layers[0];
        if target.dim() != layer0.readouts.dim() {
            return Err(Error::input("target shape must be query_len × embed_dim"));
        }
        // zero context state: readouts are the query-only term
        let offset = layer0.readouts.iter().copied().collect::<Array1<T>>();
        let flat_target: Array1<T> = target.iter().copied().collect();
        Self::new(
            (cfg.num_layers, cfg.state_dim, cfg.embed_dim),
            vec![(0, layer0.context_map.clone(), flat_target - offset)],
        )
    }

    fn residuals(&self, state: &StateStack<T>) -> Result<Vec<Array1<T>>> {
        let (layers, n, m) = self.shape;
        if state.num_layers() != layers || state.layer_shape() != (n, m) {
            return Err(Error::input("state shape does not match the surrogate"));
        }
        Ok(self
            .terms
            .iter()
            .map(|(l, a, b)| a.dot(&ArrayView1::from(state.layer_slice(*l))) - b)
            .collect())
    }
}

impl<T: Scalar> StateObjective<T> for SquaredErrorSurrogate<T> {
    fn loss(&self, state: &StateStack<T>) -> Result<f64> {
        self.calls.record_forward();
        let r = self.residuals(state)?;
        Ok(r.iter()
            .flat_map(|v| v.iter())
            .map(|x| 0.5 * x.as_f64() * x.as_f64())
            .sum())
    }

    fn loss_and_gradient(&self, state: &StateStack<T>) -> Result<(f64, StateStack<T>)> {
        self.calls.record_forward();
        self.calls.record_backward();
        let r = self.residuals(state)?;
        let loss = r
            .iter()
            .flat_map(|v| v.iter())
            .map(|x| 0.5 * x.as_f64() * x.as_f64())
            .sum();
        let (layers, n, m) = self.shape;
        let mut grad = StateStack::zeros(layers, n, m);
        for ((l, a, _), res) in self.terms.iter().zip(&r) {
            let g = a.t().dot(res);
            for (d, v) in grad.layer_slice_mut(*l).iter_mut().zip(g.iter()) {
                *d += *v;
            }
        }
        Ok((loss, grad))
    }

    fn calls(&self) -> CallCounts {
        self.calls.snapshot()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::ModelConfig;

    #[test]
    fn counts_passes() {
        let p = ModelParams::<f64>::init(&ModelConfig::new(9, 4, 3, 2)).unwrap();
        let obj = LanguageObjective::question(&p, &[1, 2, 3]).unwrap();
        let h = p.zero_state();
        obj.loss(&h).unwrap();
        obj.loss_and_gradient(&h).unwrap();
        assert_eq!(
            obj.calls(),
            CallCounts {
                forward: 2,
                backward: 1
            }
        );
    }

    #[test]
    fn oracle_scores_answer_only() {
        let p = ModelParams::<f64>::init(&ModelConfig::new(9, 4, 3, 2)).unwrap();
        let obj = LanguageObjective::oracle(&p, &[1, 2], &[5, 6]).unwrap();
        assert_eq!(obj.span(), 2..4);
        assert!(LanguageObjective::question(&p, &[1]).is_err());
    }

    #[test]
    fn surrogate_matches_first_layer_readouts() {
        let p = ModelParams::<f64>::init(&ModelConfig::new(9, 4, 3, 2).with_seed(2)).unwrap();
        let q = [3u32, 1, 4];
        let target = Array2::from_elem((3, 4), 0.25);
        let s = SquaredErrorSurrogate::first_layer_readouts(&p, &q, &target).unwrap();
        let h = crate::ssm::forward_scan(&p, &[5, 6, 7], None).unwrap().final_state;
        let dec = decomposed_output(&p, &[5, 6, 7], &q).unwrap();
        let want: f64 = dec.layers[0]
            .readouts
            .iter()
            .zip(target.iter())
            .map(|(y, t)| 0.5 * (y - t) * (y - t))
            .sum();
        assert!((s.loss(&h).unwrap() - want).abs() < 1e-10);
    }
}
