//! Token cross-entropy over a scored span, and its gradients.

use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{ModelParams, ParamTensors};
use super::scan::{backward, forward_with_tape, head, run_layers};
use super::state::StateStack;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-token negative log-likelihood, in nats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub per_token: Vec<f64>,
    pub token_count: usize,
}

impl LossReport {
    fn from_tokens(per_token: Vec<f64>) -> Self {
        LossReport {
            total: per_token.iter().sum(),
            token_count: per_token.len(),
            per_token,
        }
    }

    pub fn mean(&self) -> f64 {
        if self.token_count == 0 {
            0.0
        } else {
            self.total / self.token_count as f64
        }
    }
}

fn check_span<T: Scalar>(params: &ModelParams<T>, tokens: &[u32], span: &Range<usize>) -> Result<()> {
    params.check_tokens(tokens)?;
    if span.is_empty() {
        return Err(Error::input("scored span is empty"));
    }
    if span.start == 0 {
        return Err(Error::input(
            "scored span must start at 1 or later; token 0 has no prediction",
        ));
    }
    if span.end > tokens.len() {
        return Err(Error::input(format!(
            "scored span {:?} exceeds sequence length {}",
            span,
            tokens.len()
        )));
    }
    Ok(())
}

/// Row-wise cross-entropy of `logits[t-1]` against `tokens[t]` for `t` in
/// `span`. Returns per-token losses and, when asked, dL/dlogits.
fn cross_entropy<T: Scalar>(
    logits: &Array2<T>,
    tokens: &[u32],
    span: &Range<usize>,
    want_grad: bool,
) -> (Vec<f64>, Option<Array2<T>>) {
    let mut per_token = Vec::with_capacity(span.len());
    let mut dlogits = want_grad.then(|| Array2::<T>::zeros(logits.dim()));
    for t in span.clone() {
        let row = logits.row(t - 1);
        let max = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
        let sum_exp: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        let target = tokens[t] as usize;
        per_token.push((log_z - row[target]).as_f64());
        if let Some(d) = dlogits.as_mut() {
            let mut drow = d.row_mut(t - 1);
            for (dv, &v) in drow.iter_mut().zip(row.iter()) {
                *dv = (v - log_z).exp();
            }
            drow[target] -= T::one();
        }
    }
    (per_token, dlogits)
}

/// Cross-entropy of `tokens[span]`, each conditioned on its prefix and on
/// the injected `init` state.
pub fn sequence_loss<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    init: Option<&StateStack<T>>,
    span: Range<usize>,
) -> Result<LossReport> {
    check_span(params, tokens, &span)?;
    // positions past the last prediction never influence the loss
    let used = &tokens[..span.end - 1];
    let (stream, _, _) = run_layers(params, used, init, false)?;
    let logits = head(params, &stream);
    let (per_token, _) = cross_entropy(&logits, tokens, &span, false);
    Ok(LossReport::from_tokens(per_token))
}

/// Loss together with dL/d(init) from a single backward pass.
pub fn loss_and_state_gradient<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    init: Option<&StateStack<T>>,
    span: Range<usize>,
) -> Result<(LossReport, StateStack<T>)> {
    check_span(params, tokens, &span)?;
    let used = &tokens[..span.end - 1];
    let tape = forward_with_tape(params, used, init)?;
    let logits = head(params, &tape.stream);
    let (per_token, dlogits) = cross_entropy(&logits, tokens, &span, true);
    let dlogits = dlogits.expect("requested");
    let dstream = dlogits.dot(&params.tensors.unembedding);
    let grads = backward(params, used, &tape, dstream, None);
    Ok((LossReport::from_tokens(per_token), grads.init))
}

/// Exact gradient of the span loss with respect to every entry of `init`.
pub fn state_gradient<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    init: Option<&StateStack<T>>,
    span: Range<usize>,
) -> Result<StateStack<T>> {
    loss_and_state_gradient(params, tokens, init, span).map(|(_, g)| g)
}

/// Loss plus gradients for every parameter tensor, from `init` (zero when
/// `None`).
pub fn loss_and_param_gradients<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    init: Option<&StateStack<T>>,
    span: Range<usize>,
) -> Result<(LossReport, ParamTensors<T>)> {
    check_span(params, tokens, &span)?;
    let used = &tokens[..span.end - 1];
    let tape = forward_with_tape(params, used, init)?;
    let logits = head(params, &tape.stream);
    let (per_token, dlogits) = cross_entropy(&logits, tokens, &span, true);
    let dlogits = dlogits.expect("requested");
    let dstream = dlogits.dot(&params.tensors.unembedding);
    let dunembed = dlogits.t().dot(&tape.stream);
    let grads = backward(params, used, &tape, dstream, Some(dunembed));
    Ok((LossReport::from_tokens(per_token), grads.params.expect("requested")))
}

/// Parameter gradients of the span loss from a zero initial state.
pub fn param_gradients<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    span: Range<usize>,
) -> Result<ParamTensors<T>> {
    loss_and_param_gradients(params, tokens, None, span).map(|(_, g)| g)
}
