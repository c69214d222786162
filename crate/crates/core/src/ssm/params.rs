use ndarray::{Array1, Array2};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Initial decay bias; sigmoid(2) ≈ 0.88.
pub const INITIAL_DECAY_BIAS: f64 = 2.0;

/// Weights of one scalar-gated layer.
///
/// Per token `x`: decay `a = sigmoid(decay_weight·x + decay_bias)`,
/// key `k = key_proj·x`, query `q = query_proj·x`; the output projection maps
/// the layer readout back into the residual stream.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub decay_weight: Array1<T>,
    pub decay_bias: T,
    pub key_proj: Array2<T>,
    pub query_proj: Array2<T>,
    pub out_proj: Array2<T>,
}

/// All trainable tensors. Also used as the container for their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensors<T> {
    pub embedding: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub unembedding: Array2<T>,
}

impl<T: Scalar> ParamTensors<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, m, n) = (config.vocab_size, config.embed_dim, config.state_dim);
        ParamTensors {
            embedding: Array2::zeros((v, m)),
            layers: (0..config.num_layers)
                .map(|_| LayerParams {
                    decay_weight: Array1::zeros(m),
                    decay_bias: T::zero(),
                    key_proj: Array2::zeros((n, m)),
                    query_proj: Array2::zeros((n, m)),
                    out_proj: Array2::zeros((m, m)),
                })
                .collect(),
            unembedding: Array2::zeros((v, m)),
        }
    }

    /// Visit every tensor as a flat slice, in checkpoint declaration order.
    pub fn for_each_slice<F: FnMut(&[T])>(&self, mut f: F) {
        f(self.embedding.as_slice().expect("standard layout"));
        for layer in &self.layers {
            f(layer.decay_weight.as_slice().expect("standard layout"));
            f(std::slice::from_ref(&layer.decay_bias));
            f(layer.key_proj.as_slice().expect("standard layout"));
            f(layer.query_proj.as_slice().expect("standard layout"));
            f(layer.out_proj.as_slice().expect("standard layout"));
        }
        f(self.unembedding.as_slice().expect("standard layout"));
    }

    pub fn for_each_slice_mut<F: FnMut(&mut [T])>(&mut self, mut f: F) {
        f(self.embedding.as_slice_mut().expect("standard layout"));
        for layer in &mut self.layers {
            f(layer.decay_weight.as_slice_mut().expect("standard layout"));
            f(std::slice::from_mut(&mut layer.decay_bias));
            f(layer.key_proj.as_slice_mut().expect("standard layout"));
            f(layer.query_proj.as_slice_mut().expect("standard layout"));
            f(layer.out_proj.as_slice_mut().expect("standard layout"));
        }
        f(self.unembedding.as_slice_mut().expect("standard layout"));
    }

    pub fn num_scalars(&self) -> usize {
        let mut total = 0;
        self.for_each_slice(|s| total += s.len());
        total
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_scalars());
        self.for_each_slice(|s| out.extend_from_slice(s));
        out
    }

    /// Overwrite every tensor from a flat vector in declaration order.
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::input(format!(
                "expected {} scalars, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut offset = 0;
        self.for_each_slice_mut(|s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
        Ok(())
    }

    /// `self += weight * other`.
    pub fn add_scaled(&mut self, weight: T, other: &Self) {
        let flat = other.to_flat();
        let mut offset = 0;
        self.for_each_slice_mut(|s| {
            let len = s.len();
            for (d, &v) in s.iter_mut().zip(&flat[offset..offset + len]) {
                *d += weight * v;
            }
            offset += len;
        });
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_slice(|s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn cast<U: Scalar>(&self) -> ParamTensors<U> {
        let c2 = |a: &Array2<T>| a.mapv(|v| U::from_f64_lossy(v.as_f64()));
        ParamTensors {
            embedding: c2(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    decay_weight: l.decay_weight.mapv(|v| U::from_f64_lossy(v.as_f64())),
                    decay_bias: U::from_f64_lossy(l.decay_bias.as_f64()),
                    key_proj: c2(&l.key_proj),
                    query_proj: c2(&l.query_proj),
                    out_proj: c2(&l.out_proj),
                })
                .collect(),
            unembedding: c2(&self.unembedding),
        }
    }
}

/// A model: its configuration plus trained tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tensors: ParamTensors<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialization: embeddings uniform in [-1, 1], projections
    /// uniform in ±1/sqrt(fan_in), decay bias fixed at [`INITIAL_DECAY_BIAS`].
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut config = config.clone();
        config.precision = T::PRECISION;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let (v, m, n) = (config.vocab_size, config.embed_dim, config.state_dim);
        let scale = 1.0 / (m as f64).sqrt();
        let unit = Uniform::new_inclusive(-1.0f64, 1.0);
        let mut fill = |shape: (usize, usize), s: f64| {
            Array2::from_shape_fn(shape, |_| T::from_f64_lossy(unit.sample(&mut rng) * s))
        };

        let embedding = fill((v, m), 1.0);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let decay_weight = fill((1, m), scale).into_shape_with_order(m).unwrap();
            let key_proj = fill((n, m), scale);
            let query_proj = fill((n, m), scale);
            let out_proj = fill((m, m), scale);
            layers.push(LayerParams {
                decay_weight,
                decay_bias: T::from_f64_lossy(INITIAL_DECAY_BIAS),
                key_proj,
                query_proj,
                out_proj,
            });
        }
        let unembedding = fill((v, m), scale);
        Ok(ModelParams {
            config,
            tensors: ParamTensors {
                embedding,
                layers,
                unembedding,
            },
        })
    }

    pub fn from_tensors(config: ModelConfig, tensors: ParamTensors<T>) -> Result<Self> {
        config.validate()?;
        let expected = ParamTensors::<T>::zeros(&config);
        let shapes_match = expected.embedding.dim() == tensors.embedding.dim()
            && expected.unembedding.dim() == tensors.unembedding.dim()
            && expected.layers.len() == tensors.layers.len()
            && expected.layers.iter().zip(&tensors.layers).all(|(a, b)| {
                a.decay_weight.dim() == b.decay_weight.dim()
                    && a.key_proj.dim() == b.key_proj.dim()
                    && a.query_proj.dim() == b.query_proj.dim()
                    && a.out_proj.dim() == b.out_proj.dim()
            });
        if !shapes_match {
            return Err(Error::input("tensor shapes do not match the configuration"));
        }
        if !tensors.is_finite() {
            return Err(Error::input("parameters contain non-finite values"));
        }
        let mut config = config;
        config.precision = T::PRECISION;
        Ok(ModelParams { config, tensors })
    }

    pub fn zero_state(&self) -> super::StateStack<T> {
        super::StateStack::zeros(self.config.num_layers, self.config.state_dim, self.config.embed_dim)
    }

    /// SHA-256 over the shape/seed fields and every parameter widened to f64.
    ///
    /// The widening is exact, so an f32 model and its f64 copy share a
    /// fingerprint, and any change to any stored parameter changes it.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        let c = &self.config;
        for field in [c.vocab_size, c.embed_dim, c.state_dim, c.num_layers] {
            hasher.update((field as u64).to_le_bytes());
        }
        hasher.update(c.rng_seed.to_le_bytes());
        self.tensors.for_each_slice(|s| {
            for v in s {
                hasher.update(v.as_f64().to_le_bytes());
            }
        });
        hasher.finalize().into()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut config = self.config.clone();
        config.precision = U::PRECISION;
        ModelParams {
            config,
            tensors: self.tensors.cast(),
        }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::input(format!(
                "token id {bad} out of range for vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn check_state(&self, state: &super::StateStack<T>) -> Result<()> {
        let c = &self.config;
        if state.num_layers() != c.num_layers || state.layer_shape() != (c.state_dim, c.embed_dim) {
            return Err(Error::input(format!(
                "state shape {}x{:?} does not match model {}x({}, {})",
                state.num_layers(),
                state.layer_shape(),
                c.num_layers,
                c.state_dim,
                c.embed_dim
            )));
        }
        Ok(())
    }
}
