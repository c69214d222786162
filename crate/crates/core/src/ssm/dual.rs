//! Closed-form rewritings of the scan, used as exact cross-checks.
//!
//! Each function recomputes the layer readouts `y_t` without running the
//! recurrence, then applies the same residual update and head.

use ndarray::{s, Array2};

use super::params::{LayerParams, ModelParams};
use super::scan::{embed, gates, head};
use super::state::StateStack;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Longest sequence accepted by the quadratic-cost forms.
pub const MAX_DUAL_LEN: usize = 64;

/// Per-token gate values for one layer over a whole sequence.
pub(crate) struct LayerGates<T> {
    pub decays: Vec<T>,
    /// `len × state_dim`
    pub keys: Array2<T>,
    /// `len × state_dim`
    pub queries: Array2<T>,
}

pub(crate) fn layer_gates<T: Scalar>(layer: &LayerParams<T>, inputs: &Array2<T>) -> LayerGates<T> {
    let (len, _) = inputs.dim();
    let n = layer.key_proj.nrows();
    let mut keys = Array2::zeros((len, n));
    let mut queries = Array2::zeros((len, n));
    let mut decays = Vec::with_capacity(len);
    for t in 0..len {
        let x = inputs.row(t);
        let mut k = vec![T::zero(); n];
        let mut q = vec![T::zero(); n];
        decays.push(gates(layer, x.as_slice().expect("standard layout"), &mut k, &mut q));
        keys.row_mut(t).assign(&ndarray::ArrayView1::from(&k[..]));
        queries.row_mut(t).assign(&ndarray::ArrayView1::from(&q[..]));
    }
    LayerGates { decays, keys, queries }
}

/// `Π_{r=from..=to} decays[r]`, the empty product being 1.
pub(crate) fn decay_product<T: Scalar>(decays: &[T], from: usize, to: usize) -> T {
    if from > to {
        return T::one();
    }
    decays[from..=to].iter().fold(T::one(), |acc, &a| acc * a)
}

fn check_len(len: usize) -> Result<()> {
    if len > MAX_DUAL_LEN {
        return Err(Error::input(format!(
            "sequence length {len} exceeds the closed-form limit {MAX_DUAL_LEN}"
        )));
    }
    Ok(())
}

fn apply_layers<T: Scalar, F>(params: &ModelParams<T>, tokens: &[u32], mut readouts: F) -> Result<Array2<T>>
where
    F: FnMut(&LayerGates<T>, &Array2<T>) -> Array2<T>,
{
    params.check_tokens(tokens)?;
    let mut stream = embed(params, tokens);
    for layer in &params.tensors.layers {
        let g = layer_gates(layer, &stream);
        let y = readouts(&g, &stream);
        stream = &stream + &y.dot(&layer.out_proj.t());
    }
    Ok(head(params, &stream))
}

/// Vec-form input matrix for token `s`: `B_s = k_s ⊗ I_m`, shape `nm × m`.
fn input_matrix<T: Scalar>(key: &[T], m: usize) -> Array2<T> {
    let n = key.len();
    let mut b = Array2::zeros((n * m, m));
    for i in 0..n {
        for j in 0..m {
            b[[i * m + j, j]] = key[i];
        }
    }
    b
}

/// Vec-form readout matrix for token `t`: `C_t = q_tᵀ ⊗ I_m`, shape `m × nm`.
fn readout_matrix<T: Scalar>(query: &[T], m: usize) -> Array2<T> {
    let n = query.len();
    let mut c = Array2::zeros((m, n * m));
    for i in 0..n {
        for j in 0..m {
            c[[j, i * m + j]] = query[i];
        }
    }
    c
}

/// Logits via the unrolled controllability-matrix product: for each `t`,
/// `y_t = C_t [A_{t:1}B_0 … A_t B_{t-1}  B_t] X`, built from explicit
/// vec-form `B_s` and `C_t` matrices. Zero initial state. O(T²) cost.
pub fn unrolled_output<T: Scalar>(params: &ModelParams<T>, tokens: &[u32]) -> Result<Array2<T>> {
    check_len(tokens.len())?;
    let m = params.config.embed_dim;
    apply_layers(params, tokens, |g, inputs| {
        let len = inputs.nrows();
        let b: Vec<Array2<T>> = (0..len)
            .map(|s| input_matrix(g.keys.row(s).as_slice().unwrap(), m))
            .collect();
        let mut y = Array2::zeros((len, m));
        for t in 0..len {
            let c = readout_matrix(g.queries.row(t).as_slice().unwrap(), m);
            // controllability row for output t: m × (t+1)m
            let mut row = Array2::zeros((m, (t + 1) * m));
            for (s, b_s) in b.iter().enumerate().take(t + 1) {
                // A_{t:s+1} = (Π a_r) I
                let decay = decay_product(&g.decays, s + 1, t);
                let block = c.dot(b_s) * decay;
                row.slice_mut(s![.., s * m..(s + 1) * m]).assign(&block);
            }
            let stacked = inputs
                .slice(s![0..=t, ..])
                .to_owned()
                .into_shape_with_order((t + 1) * m)
                .expect("contiguous rows");
            y.row_mut(t).assign(&row.dot(&stacked));
        }
        y
    })
}

/// The learned causal mask `L_α` of one layer: `L[t][s] = Π_{r=s+1..t} a_r`
/// for `s ≤ t`, zero above the diagonal.
pub fn decay_mask<T: Scalar>(decays: &[T]) -> Array2<T> {
    let len = decays.len();
    Array2::from_shape_fn((len, len), |(t, s)| {
        if s <= t {
            decay_product(decays, s + 1, t)
        } else {
            T::zero()
        }
    })
}

/// Masks `L_α` per layer for a token sequence, as seen by the SSD form.
pub fn decay_masks<T: Scalar>(params: &ModelParams<T>, tokens: &[u32]) -> Result<Vec<Array2<T>>> {
    check_len(tokens.len())?;
    let mut masks = Vec::new();
    apply_layers(params, tokens, |g, inputs| {
        masks.push(decay_mask(&g.decays));
        ssd_readouts(g, inputs)
    })?;
    Ok(masks)
}

fn ssd_readouts<T: Scalar>(g: &LayerGates<T>, inputs: &Array2<T>) -> Array2<T> {
    let mask = decay_mask(&g.decays);
    let scores = g.queries.dot(&g.keys.t());
    (&mask * &scores).dot(inputs)
}

/// Logits via masked linear attention `Y = (L_α ∘ Q Kᵀ) X` per layer.
pub fn ssd_attention_form<T: Scalar>(params: &ModelParams<T>, tokens: &[u32]) -> Result<Array2<T>> {
    check_len(tokens.len())?;
    apply_layers(params, tokens, ssd_readouts)
}

/// One layer's split of the query readouts into a context term and a query
/// term: `Y_q = H_q vec(h_c) + M_q vec(X_q)`.
#[derive(Clone, Debug)]
pub struct LayerDecomposition<T> {
    /// `len_q·m × n·m`; block row `t` is `(Π_{r≤t} a_r) C_t`.
    pub context_map: Array2<T>,
    /// `len_q·m × len_q·m`, block lower-triangular; block `(t, s)` is
    /// `(Π_{r=s+1..t} a_r)(q_t·k_s) I_m`.
    pub query_map: Array2<T>,
    /// `len_q × m` readouts reconstructed from the two maps.
    pub readouts: Array2<T>,
}

#[derive(Clone, Debug)]
pub struct DecompositionResult<T> {
    pub context_state: StateStack<T>,
    pub layers: Vec<LayerDecomposition<T>>,
    /// `len_q × vocab` logits at the query positions.
    pub logits: Array2<T>,
}

/// Scan the context alone, then rebuild the query outputs from the context
/// state through the explicit `H_q` / `M_q` maps.
pub fn decomposed_output<T: Scalar>(
    params: &ModelParams<T>,
    context: &[u32],
    query: &[u32],
) -> Result<DecompositionResult<T>> {
    if query.is_empty() {
        return Err(Error::input("query must be nonempty"));
    }
    check_len(query.len())?;
    params.check_tokens(query)?;
    let context_state = if context.is_empty() {
        params.zero_state()
    } else {
        super::forward_scan(params, context, None)?.final_state
    };
    let (m, n) = (params.config.embed_dim, params.config.state_dim);
    let len = query.len();
    let mut layers = Vec::with_capacity(params.config.num_layers);
    let mut stream = embed(params, query);

    for (l, layer) in params.tensors.layers.iter().enumerate() {
        let g = layer_gates(layer, &stream);
        let mut context_map = Array2::zeros((len * m, n * m));
        let mut query_map = Array2::zeros((len * m, len * m));
        for t in 0..len {
            let carried = decay_product(&g.decays, 0, t);
            for i in 0..n {
                let qi = g.queries[[t, i]] * carried;
                for j in 0..m {
                    context_map[[t * m + j, i * m + j]] = qi;
                }
            }
            for s_idx in 0..=t {
                let w = decay_product(&g.decays, s_idx + 1, t) * g.queries.row(t).dot(&g.keys.row(s_idx));
                for j in 0..m {
                    query_map[[t * m + j, s_idx * m + j]] = w;
                }
            }
        }
        let hc = ndarray::ArrayView1::from(context_state.layer_slice(l));
        let xq = stream
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(len * m)
            .expect("contiguous");
        let flat = context_map.dot(&hc) + query_map.dot(&xq);
        let readouts = flat.into_shape_with_order((len, m)).expect("len*m entries");
        stream = &stream + &readouts.dot(&layer.out_proj.t());
        layers.push(LayerDecomposition {
            context_map,
            query_map,
            readouts,
        });
    }
    Ok(DecompositionResult {
        context_state,
        layers,
        logits: head(params, &stream),
    })
}
