use serde::{Deserialize, Serialize};

use super::mixture::{alpha_gradient, mixture_state, MixtureWeights};
use super::objective::{LanguageObjective, ObjectiveKind, StateObjective};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::ssm::ModelParams;
use crate::store::StateIndex;

/// Leave-one-out effect of one document and its first-order bound at the
/// uniform mixture `ᾱ = 1/N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Entry {
    pub doc_id: String,
    /// `L(ᾱ) − L(ᾱ⁽⁻ⁱ⁾)`; positive when dropping the document lowers the loss.
    pub loo: f64,
    /// `⟨h_i, ∂L/∂h̄(ᾱ)⟩`.
    pub bound: f64,
    /// `bound / N`: the tangent-line bound that convexity alone guarantees.
    pub scaled_bound: f64,
    /// `bound − loo`; negative means the bound is violated.
    pub slack: f64,
}

fn uniform_over<S: AsRef<str>>(doc_ids: &[S]) -> Result<MixtureWeights> {
    if doc_ids.len() < 2 {
        return Err(Error::input("leave-one-out needs at least two documents"));
    }
    MixtureWeights::uniform(doc_ids)
}

fn removed(uniform: &MixtureWeights, i: usize) -> MixtureWeights {
    let mut w = uniform.clone();
    w.alpha[i] = 0.0;
    w
}

/// `L(ᾱ) − L(ᾱ⁽⁻ⁱ⁾)` for each listed document (N + 1 forward passes).
pub fn loo_with<T: Scalar, O: StateObjective<T>, S: AsRef<str>>(
    objective: &O,
    index: &StateIndex,
    doc_ids: &[S],
) -> Result<Vec<f64>> {
    let uniform = uniform_over(doc_ids)?;
    let base = objective.loss(&mixture_state::<T>(index, &uniform)?)?;
    (0..uniform.len())
        .map(|i| Ok(base - objective.loss(&mixture_state::<T>(index, &removed(&uniform, i))?)?))
        .collect()
}

pub fn loo_loss<T: Scalar, S: AsRef<str>>(
    params: &ModelParams<T>,
    index: &StateIndex,
    query: &[u32],
    answer: Option<&[u32]>,
    kind: ObjectiveKind,
    doc_ids: &[S],
) -> Result<Vec<f64>> {
    index.validate_model(params)?;
    let objective = LanguageObjective::build(params, kind, query, answer)?;
    loo_with(&objective, index, doc_ids)
}

/// Leave-one-out effects next to the gradient bound, one forward pass per
/// document plus one forward/backward pair at `ᾱ`.
pub fn prop1_margin_with<T: Scalar, O: StateObjective<T>, S: AsRef<str>>(
    objective: &O,
    index: &StateIndex,
    doc_ids: &[S],
) -> Result<Vec<Prop1Entry>> {
    let uniform = uniform_over(doc_ids)?;
    let n = uniform.len() as f64;
    let (base, g) = objective.loss_and_gradient(&mixture_state::<T>(index, &uniform)?)?;
    let bounds = alpha_gradient(index, &uniform, &g)?;
    uniform
        .doc_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let loo = base - objective.loss(&mixture_state::<T>(index, &removed(&uniform, i))?)?;
            Ok(Prop1Entry {
                doc_id: id.clone(),
                loo,
                bound: bounds[i],
                scaled_bound: bounds[i] / n,
                slack: bounds[i] - loo,
            })
        })
        .collect()
}

pub fn prop1_margin<T: Scalar, S: AsRef<str>>(
    params: &ModelParams<T>,
    index: &StateIndex,
    query: &[u32],
    answer: Option<&[u32]>,
    kind: ObjectiveKind,
    doc_ids: &[S],
) -> Result<Vec<Prop1Entry>> {
    index.validate_model(params)?;
    let objective = LanguageObjective::build(params, kind, query, answer)?;
    prop1_margin_with(&objective, index, doc_ids)
}
