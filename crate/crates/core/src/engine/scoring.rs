use serde::{Deserialize, Serialize};

use super::mixture::{mixture_state, MixtureWeights};
use super::objective::{CallCounts, LanguageObjective, ObjectiveKind, StateObjective};
use crate::error::Result;
use crate::ranking::RankedList;
use crate::scalar::Scalar;
use crate::ssm::{ModelParams, StateStack};
use crate::store::StateIndex;

/// Where the single gradient step is taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `α = 1/N` over the whole index.
    Uniform,
    /// `h̄ = 0`: the query scanned with no context.
    Zero,
    Custom(MixtureWeights),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradScore {
    /// Every indexed document ranked by `⟨h_i, −∂L/∂h̄⟩`.
    pub ranking: RankedList,
    pub loss: f64,
    pub calls: CallCounts,
}

fn init_state<T: Scalar>(index: &StateIndex, init: &InitMode) -> Result<StateStack<T>> {
    match init {
        InitMode::Uniform => {
            let ids: Vec<&str> = index.doc_ids().collect();
            mixture_state(index, &MixtureWeights::uniform(&ids)?)
        }
        InitMode::Zero => Ok(StateStack::zeros(
            index.num_layers(),
            index.state_dim(),
            index.embed_dim(),
        )),
        InitMode::Custom(w) => {
            w.validate()?;
            mixture_state(index, w)
        }
    }
}

/// One forward and one backward pass, then a single inner-product sweep.
pub fn grad_score_with<T: Scalar, O: StateObjective<T>>(
    objective: &O,
    index: &StateIndex,
    init: &InitMode,
) -> Result<GradScore> {
    let before = objective.calls();
    let state = init_state::<T>(index, init)?;
    let (loss, mut g) = objective.loss_and_gradient(&state)?;
    g.scale(-T::one());
    let scores = index.scores(&g)?;
    let after = objective.calls();
    Ok(GradScore {
        ranking: RankedList::from_scores(index.doc_ids().zip(scores))?,
        loss,
        calls: CallCounts {
            forward: after.forward - before.forward,
            backward: after.backward - before.backward,
        },
    })
}

pub fn grad_score<T: Scalar>(
    params: &ModelParams<T>,
    index: &StateIndex,
    query: &[u32],
    answer: Option<&[u32]>,
    kind: ObjectiveKind,
    init: &InitMode,
) -> Result<GradScore> {
    index.validate_model(params)?;
    let objective = LanguageObjective::build(params, kind, query, answer)?;
    grad_score_with(&objective, index, init)
}

/// Initial weights from a coarse ranking: scores of the listed documents are
/// min-max scaled into `[0.1, 1]`; documents absent from `coarse` get 0.1
/// and a constant score maps to 0.55.
pub fn warm_start<S: AsRef<str>>(coarse: &RankedList, doc_ids: &[S]) -> Result<MixtureWeights> {
    let scores: Vec<Option<f64>> = doc_ids
        .iter()
        .map(|id| coarse.score_of(id.as_ref()).filter(|s| s.is_finite()))
        .collect();
    let present = scores.iter().flatten();
    let lo = present.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = present.copied().fold(f64::NEG_INFINITY, f64::max);
    let alpha = scores
        .iter()
        .map(|s| match s {
            None => 0.1,
            Some(_) if hi <= lo => 0.55,
            Some(v) => (0.1 + 0.9 * (v - lo) / (hi - lo)).clamp(0.1, 1.0),
        })
        .collect();
    MixtureWeights::new(doc_ids.iter().map(|s| s.as_ref().to_owned()).collect(), alpha)
}

/// Order documents by their optimized weight.
pub fn rerank(weights: &MixtureWeights) -> Result<RankedList> {
    weights.validate()?;
    RankedList::from_scores(weights.doc_ids.iter().cloned().zip(weights.alpha.iter().copied()))
}
