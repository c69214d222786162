//! Recurrent forward scan and its reverse-mode backward pass.
//!
//! Per layer and token:
//!
//! ```text
//! a_t = sigmoid(w_a · x_t + c_a)
//! S_t = a_t S_{t-1} + k_t x_tᵀ        k_t = W_k x_t
//! y_t = S_tᵀ q_t                      q_t = W_q x_t
//! x_t ← x_t + W_o y_t
//! ```

use ndarray::{Array2, ArrayView1};

use super::params::{LayerParams, ModelParams, ParamTensors};
use super::state::StateStack;
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};

/// Logits for every position plus the state after the last token.
#[derive(Clone, Debug)]
pub struct ScanOutput<T> {
    /// `len × vocab_size`; row `t` predicts token `t + 1`.
    pub logits: Array2<T>,
    pub final_state: StateStack<T>,
}

/// Everything the backward pass needs from one layer.
pub(crate) struct LayerTape<T> {
    inputs: Array2<T>,
    decays: Vec<T>,
    keys: Array2<T>,
    queries: Array2<T>,
    readouts: Array2<T>,
    /// `states[t]` is the state before token `t`; `states[len]` is final.
    states: Vec<Vec<T>>,
}

pub(crate) struct Tape<T> {
    layers: Vec<LayerTape<T>>,
    /// Residual stream leaving the last layer, `len × embed_dim`.
    pub(crate) stream: Array2<T>,
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `out = mat · v` for a row-major `rows × v.len()` matrix.
#[inline]
pub(crate) fn matvec<T: Scalar>(mat: &[T], v: &[T], out: &mut [T]) {
    let cols = v.len();
    for (o, row) in out.iter_mut().zip(mat.chunks_exact(cols)) {
        *o = dot(row, v);
    }
}

/// `out += matᵀ · v` for a row-major `v.len() × out.len()` matrix.
#[inline]
pub(crate) fn matvec_t_acc<T: Scalar>(mat: &[T], v: &[T], out: &mut [T]) {
    let cols = out.len();
    for (&vi, row) in v.iter().zip(mat.chunks_exact(cols)) {
        if vi != T::zero() {
            for (o, &r) in out.iter_mut().zip(row) {
                *o += vi * r;
            }
        }
    }
}

/// `mat += u vᵀ`.
#[inline]
pub(crate) fn outer_acc<T: Scalar>(mat: &mut [T], u: &[T], v: &[T]) {
    let cols = v.len();
    for (&ui, row) in u.iter().zip(mat.chunks_exact_mut(cols)) {
        if ui != T::zero() {
            for (r, &vj) in row.iter_mut().zip(v) {
                *r += ui * vj;
            }
        }
    }
}

fn slice<T>(a: &Array2<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}

/// Decay, key and query for one token of one layer.
#[inline]
pub(crate) fn gates<T: Scalar>(layer: &LayerParams<T>, x: &[T], key: &mut [T], query: &mut [T]) -> T {
    let w = layer.decay_weight.as_slice().expect("standard layout");
    let a = sigmoid(dot(w, x) + layer.decay_bias);
    matvec(slice(&layer.key_proj), x, key);
    matvec(slice(&layer.query_proj), x, query);
    a
}

pub(crate) fn embed<T: Scalar>(params: &ModelParams<T>, tokens: &[u32]) -> Array2<T> {
    let m = params.config.embed_dim;
    let mut out = Array2::zeros((tokens.len(), m));
    for (t, &tok) in tokens.iter().enumerate() {
        out.row_mut(t).assign(&params.tensors.embedding.row(tok as usize));
    }
    out
}

/// Final hidden rows, final states and (when recording) per-layer tapes.
type LayerRun<T> = (Array2<T>, StateStack<T>, Vec<LayerTape<T>>);

/// Run every layer over `tokens`, optionally recording a tape.
pub(crate) fn run_layers<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    init: Option<&StateStack<T>>,
    record: bool,
) -> Result<LayerRun<T>> {
    params.check_tokens(tokens)?;
    if let Some(s) = init {
        params.check_state(s)?;
    }
    let cfg = &params.config;
    let (m, n) = (cfg.embed_dim, cfg.state_dim);
    let len = tokens.len();

    let mut stream = embed(params, tokens);
    let mut final_layers = Vec::with_capacity(cfg.num_layers);
    let mut tapes = Vec::new();
    let mut key = vec![T::zero(); n];
    let mut query = vec![T::zero(); n];
    let mut readout = vec![T::zero(); m];

    for (l, layer) in params.tensors.layers.iter().enumerate() {
        let mut state: Vec<T> = match init {
            Some(s) => s.layer_slice(l).to_vec(),
            None => vec![T::zero(); n * m],
        };
        let mut tape = record.then(|| LayerTape {
            inputs: stream.clone(),
            decays: Vec::with_capacity(len),
            keys: Array2::zeros((len, n)),
            queries: Array2::zeros((len, n)),
            readouts: Array2::zeros((len, m)),
            states: {
                let mut v = Vec::with_capacity(len + 1);
                v.push(state.clone());
                v
            },
        });
        let out_proj = slice(&layer.out_proj);

        for t in 0..len {
            let mut row = stream.row_mut(t);
            let x = row.as_slice_mut().expect("standard layout");
            let a = gates(layer, x, &mut key, &mut query);
            for (i, srow) in state.chunks_exact_mut(m).enumerate() {
                let ki = key[i];
                for (s, &xj) in srow.iter_mut().zip(x.iter()) {
                    *s = a * *s + ki * xj;
                }
            }
            readout.iter_mut().for_each(|v| *v = T::zero());
            matvec_t_acc(&state, &query, &mut readout);
            if !readout.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric { layer: l, position: t });
            }
            if let Some(tape) = tape.as_mut() {
                tape.decays.push(a);
                tape.keys.row_mut(t).assign(&ArrayView1::from(&key[..]));
                tape.queries.row_mut(t).assign(&ArrayView1::from(&query[..]));
                tape.readouts.row_mut(t).assign(&ArrayView1::from(&readout[..]));
                tape.states.push(state.clone());
            }
            for (xr, wrow) in x.iter_mut().zip(out_proj.chunks_exact(m)) {
                *xr += dot(wrow, &readout);
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric { layer: l, position: t });
            }
        }
        final_layers.push(Array2::from_shape_vec((n, m), state).expect("state buffer has n*m entries"));
        if let Some(tape) = tape {
            tapes.push(tape);
        }
    }
    Ok((stream, StateStack::from_layers(final_layers)?, tapes))
}

/// `logits = stream · W_outᵀ`.
pub(crate) fn head<T: Scalar>(params: &ModelParams<T>, stream: &Array2<T>) -> Array2<T> {
    stream.dot(&params.tensors.unembedding.t())
}

/// Recurrent scan from `init` (zero state when `None`).
pub fn forward_scan<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    init: Option<&StateStack<T>>,
) -> Result<ScanOutput<T>> {
    let (stream, final_state, _) = run_layers(params, tokens, init, false)?;
    Ok(ScanOutput {
        logits: head(params, &stream),
        final_state,
    })
}

pub(crate) fn forward_with_tape<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    init: Option<&StateStack<T>>,
) -> Result<Tape<T>> {
    let (stream, _, layers) = run_layers(params, tokens, init, true)?;
    Ok(Tape { layers, stream })
}

/// Gradients produced by one backward pass.
pub(crate) struct Backward<T> {
    pub(crate) init: StateStack<T>,
    pub(crate) params: Option<ParamTensors<T>>,
}

/// Reverse accumulation through every layer.
///
/// `dstream` is dL/d(final residual stream); `dunembed`, when parameter
/// gradients are wanted, already holds dL/dW_out from the head.
pub(crate) fn backward<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    tape: &Tape<T>,
    mut dstream: Array2<T>,
    dunembed: Option<Array2<T>>,
) -> Backward<T> {
    let cfg = &params.config;
    let (m, n) = (cfg.embed_dim, cfg.state_dim);
    let len = tokens.len();
    let want_params = dunembed.is_some();
    let mut grads = want_params.then(|| ParamTensors::<T>::zeros(cfg));
    let mut dinit_layers = vec![Array2::zeros((n, m)); cfg.num_layers];

    let mut dy = vec![T::zero(); m];
    let mut dq = vec![T::zero(); n];
    let mut dk = vec![T::zero(); n];
    // dL/dS_t carried backwards through time
    let mut carry = vec![T::zero(); n * m];

    for l in (0..cfg.num_layers).rev() {
        let layer = &params.tensors.layers[l];
        let lt = &tape.layers[l];
        let out_proj = slice(&layer.out_proj);
        let key_proj = slice(&layer.key_proj);
        let query_proj = slice(&layer.query_proj);
        let decay_w = layer.decay_weight.as_slice().expect("standard layout");
        carry.iter_mut().for_each(|v| *v = T::zero());
        // residual: dL/dx_in starts as dL/dx_out
        let mut dinput = dstream.clone();

        for t in (0..len).rev() {
            let dz = dstream.row(t);
            let dz = dz.as_slice().expect("standard layout");
            let x = lt.inputs.row(t);
            let x = x.as_slice().expect("standard layout");
            let q = lt.queries.row(t);
            let q = q.as_slice().expect("standard layout");
            let k = lt.keys.row(t);
            let k = k.as_slice().expect("standard layout");
            let a = lt.decays[t];
            let s_prev = &lt.states[t];
            let s_cur = &lt.states[t + 1];

            // z = x + W_o y
            dy.iter_mut().for_each(|v| *v = T::zero());
            matvec_t_acc(out_proj, dz, &mut dy);
            // y = S_tᵀ q: dS_t += q dyᵀ, dq = S_t dy
            outer_acc(&mut carry, q, &dy);
            matvec(s_cur, &dy, &mut dq);

            // S_t = a S_{t-1} + k xᵀ
            let da = dot(&carry, s_prev);
            matvec(&carry, x, &mut dk);
            let du = da * a * (T::one() - a);

            let mut drow = dinput.row_mut(t);
            let dx = drow.as_slice_mut().expect("standard layout");
            matvec_t_acc(&carry, k, dx);
            for (d, &w) in dx.iter_mut().zip(decay_w) {
                *d += du * w;
            }
            matvec_t_acc(key_proj, &dk, dx);
            matvec_t_acc(query_proj, &dq, dx);

            if let Some(g) = grads.as_mut() {
                let gl = &mut g.layers[l];
                let y = lt.readouts.row(t);
                outer_acc(
                    gl.out_proj.as_slice_mut().expect("standard layout"),
                    dz,
                    y.as_slice().expect("standard layout"),
                );
                for (gw, &xj) in gl
                    .decay_weight
                    .as_slice_mut()
                    .expect("standard layout")
                    .iter_mut()
                    .zip(x)
                {
                    *gw += du * xj;
                }
                gl.decay_bias += du;
                outer_acc(gl.key_proj.as_slice_mut().expect("standard layout"), &dk, x);
                outer_acc(gl.query_proj.as_slice_mut().expect("standard layout"), &dq, x);
            }

            carry.iter_mut().for_each(|c| *c *= a);
        }
        dinit_layers[l]
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(&carry);
        dstream = dinput;
    }

    if let Some(g) = grads.as_mut() {
        for (t, &tok) in tokens.iter().enumerate() {
            let mut row = g.embedding.row_mut(tok as usize);
            row += &dstream.row(t);
        }
        g.unembedding = dunembed.expect("present when parameter gradients are wanted");
    }

    Backward {
        init: StateStack::from_layers(dinit_layers).expect("uniform layer shapes"),
        params: grads,
    }
}
