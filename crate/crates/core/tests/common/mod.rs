//! Naive reference model and random instance generators shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rico_core::engine::SquaredErrorSurrogate;
use rico_core::ssm::{ModelConfig, ModelParams, StateStack};
use rico_core::store::{precompute_states, DocumentRecord, StateIndex};

/// Straight-line recurrence on nested `Vec`s: returns per-position logits and
/// the final per-layer states (`n × m`, row-major).
pub fn oracle_forward(
    params: &ModelParams<f64>,
    tokens: &[u32],
    init: Option<&StateStack<f64>>,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let cfg = &params.config;
    let (m, n) = (cfg.embed_dim, cfg.state_dim);
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| params.tensors.embedding.row(t as usize).to_vec())
        .collect();
    let mut finals = Vec::new();
    for (l, layer) in params.tensors.layers.iter().enumerate() {
        let mut s: Vec<f64> = match init {
            Some(h) => h.layer(l).iter().copied().collect(),
            None => vec![0.0; n * m],
        };
        let mut next = Vec::with_capacity(xs.len());
        for x in &xs {
            let pre: f64 = (0..m).map(|j| layer.decay_weight[j] * x[j]).sum::<f64>() + layer.decay_bias;
            let a = 1.0 / (1.0 + (-pre).exp());
            let k: Vec<f64> = (0..n)
                .map(|i| (0..m).map(|j| layer.key_proj[[i, j]] * x[j]).sum())
                .collect();
            let q: Vec<f64> = (0..n)
                .map(|i| (0..m).map(|j| layer.query_proj[[i, j]] * x[j]).sum())
                .collect();
            for i in 0..n {
                for j in 0..m {
                    s[i * m + j] = a * s[i * m + j] + k[i] * x[j];
                }
            }
            let y: Vec<f64> = (0..m).map(|j| (0..n).map(|i| s[i * m + j] * q[i]).sum()).collect();
            let out: Vec<f64> = (0..m)
                .map(|r| x[r] + (0..m).map(|c| layer.out_proj[[r, c]] * y[c]).sum::<f64>())
                .collect();
            next.push(out);
        }
        finals.push(s);
        xs = next;
    }
    let v = cfg.vocab_size;
    let logits = xs
        .iter()
        .map(|x| {
            (0..v)
                .map(|t| (0..m).map(|j| params.tensors.unembedding[[t, j]] * x[j]).sum())
                .collect()
        })
        .collect();
    (logits, finals)
}

/// Sum of `-log softmax(logits[t-1])[tokens[t]]` over `span`.
pub fn oracle_loss(
    params: &ModelParams<f64>,
    tokens: &[u32],
    init: Option<&StateStack<f64>>,
    span: std::ops::Range<usize>,
) -> f64 {
    let (logits, _) = oracle_forward(params, tokens, init);
    span.map(|t| {
        let row = &logits[t - 1];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
        lse - row[tokens[t] as usize]
    })
    .sum()
}

pub fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig::new(
        rng.gen_range(4..=12),
        rng.gen_range(2..=6),
        rng.gen_range(1..=5),
        rng.gen_range(1..=3),
    )
    .with_seed(rng.gen())
}

/// Seeded parameters with decay biases spread so gates range widely.
pub fn random_params(rng: &mut ChaCha8Rng) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(&random_config(rng)).unwrap();
    for layer in &mut p.tensors.layers {
        layer.decay_bias = rng.gen_range(-1.0..3.0);
    }
    p
}

pub fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

pub fn random_state(rng: &mut ChaCha8Rng, params: &ModelParams<f64>, scale: f64) -> StateStack<f64> {
    let c = &params.config;
    StateStack::from_layers(
        (0..c.num_layers)
            .map(|_| Array2::from_shape_fn((c.state_dim, c.embed_dim), |_| rng.gen_range(-scale..scale)))
            .collect(),
    )
    .unwrap()
}

pub fn max_abs_diff_rows(a: &Array2<f64>, b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.nrows(), b.len());
    a.rows()
        .into_iter()
        .zip(b)
        .flat_map(|(r, o)| r.iter().zip(o).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// `count` random documents, with the last `dups` repeating earlier token
/// sequences under fresh ids.
pub fn random_index(
    rng: &mut ChaCha8Rng,
    params: &ModelParams<f64>,
    count: usize,
    dups: usize,
) -> (StateIndex, Vec<DocumentRecord>) {
    let mut docs: Vec<DocumentRecord> = (0..count)
        .map(|i| {
            let len = rng.gen_range(1..=8);
            DocumentRecord::new(format!("d{i:03}"), random_tokens(rng, params.config.vocab_size, len))
        })
        .collect();
    for j in 0..dups {
        let src = docs[rng.gen_range(0..count)].token_ids.clone();
        docs.push(DocumentRecord::new(format!("dup{j}"), src));
    }
    (precompute_states(params, &docs).unwrap(), docs)
}

/// Random `½ Σ ‖A_l vec(h_l) − b_l‖²` over every layer.
pub fn random_surrogate(rng: &mut ChaCha8Rng, params: &ModelParams<f64>, rows: usize) -> SquaredErrorSurrogate<f64> {
    let c = &params.config;
    let nm = c.state_dim * c.embed_dim;
    let terms = (0..c.num_layers)
        .map(|l| {
            let a = Array2::from_shape_fn((rows, nm), |_| rng.gen_range(-1.0..1.0));
            let b = ndarray::Array1::from_shape_fn(rows, |_| rng.gen_range(-2.0..2.0));
            (l, a, b)
        })
        .collect();
    SquaredErrorSurrogate::new((c.num_layers, c.state_dim, c.embed_dim), terms).unwrap()
}
